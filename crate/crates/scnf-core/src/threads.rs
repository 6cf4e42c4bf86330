//! Worker-thread bookkeeping. `SCNF_THREADS` caps the rayon pool size;
//! all parallel kernels are row-partitioned so results do not depend on
//! the worker count.

#[cfg(not(target_arch = "wasm32"))]
mod native {
    use std::sync::OnceLock;

    static POOL_SIZE: OnceLock<usize> = OnceLock::new();

    /// Build the global pool once, honoring `SCNF_THREADS` when set.
    pub fn init() -> usize {
        *POOL_SIZE.get_or_init(|| {
            let cap = std::env::var("SCNF_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n >= 1);
            let n = match cap {
                Some(n) => {
                    // Ignore the error if a pool was already installed.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                    n
                }
                None => rayon::current_num_threads(),
            };
            n.max(1)
        })
    }

    pub fn pool_size() -> usize {
        init()
    }
}

#[cfg(not(target_arch = "wasm32"))]
pub use native::{init, pool_size};

#[cfg(target_arch = "wasm32")]
pub fn init() -> usize {
    1
}

#[cfg(target_arch = "wasm32")]
pub fn pool_size() -> usize {
    1
}
