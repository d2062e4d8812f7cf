//! Allocator tuning for the inference and training processes.
//!
//! A forward pass allocates a few hundred megabytes of short-lived 4-16 MB
//! buffers. With glibc defaults each of these is a fresh `mmap`, so every
//! pass pays for page faults and kernel zeroing. Raising the mmap threshold
//! keeps them on the heap, where freed blocks are reused by the next pass.

/// Keep large freed buffers in-process. Safe to call more than once; a no-op
/// on platforms other than glibc Linux.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
