//! Floating-point environment control.
//!
//! Once a model is confident, softmax outputs and their gradients drift into
//! the subnormal range, where x86 arithmetic falls back to slow microcode.
//! Training steps on a converged model ran more than twice as slow as on a
//! fresh one until subnormals were flushed to zero.

/// Set flush-to-zero and denormals-are-zero for SSE/AVX arithmetic on the
/// calling thread. A no-op on other architectures.
#[cfg(target_arch = "x86_64")]
pub fn flush_subnormals() {
    const FTZ_DAZ: u32 = (1 << 15) | (1 << 6);
    let mut csr: u32 = 0;
    // SAFETY: stmxcsr/ldmxcsr only read and write the control register
    // through a valid pointer to a local.
    unsafe {
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags));
        if csr & FTZ_DAZ != FTZ_DAZ {
            let want = csr | FTZ_DAZ;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &want, options(nostack, preserves_flags, readonly));
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn flush_subnormals() {}
