/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_attention_fill: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_image: (a: number) => [number, number];
export const demo_landmark_overlay: (a: number) => [number, number];
export const demo_mask_stats: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_mouth_mask: (a: number) => [number, number];
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
