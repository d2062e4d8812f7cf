/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Fills the hole from known pixels with softmax attention over patch
     * features; known pixels are returned unchanged.
     */
    attention_fill(mask: Uint8Array, temperature: number): Uint8Array;
    /**
     * The face as RGBA bytes.
     */
    image(): Uint8Array;
    /**
     * The face with its rasterized landmark map drawn over it.
     */
    landmark_overlay(): Uint8Array;
    /**
     * `{"holes", "ratio", "group"}` for a 0/1 mask; group is null when the
     * mask is empty or more than 60% hole.
     */
    mask_stats(mask: Uint8Array): string;
    /**
     * A mouth-region mask as one 0/1 byte per pixel.
     */
    mouth_mask(): Uint8Array;
    constructor(seed: number, size: number);
    size(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_attention_fill: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_image: (a: number) => [number, number];
    readonly demo_landmark_overlay: (a: number) => [number, number];
    readonly demo_mask_stats: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_mouth_mask: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
