//! Deterministic seed derivation. Every random consumer gets its own stream
//! derived from one root seed and a tag path, so runs are reproducible and
//! resumable without storing generator state.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(root);
    for &t in tags {
        s = splitmix(s ^ t.wrapping_mul(GAMMA));
    }
    s
}

/// Tag namespaces; first element of every tag path.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const RIG: u64 = 2;
    pub const INIT: u64 = 3;
    pub const STEP: u64 = 4;
    pub const RAY: u64 = 5;
    pub const OBJECT: u64 = 6;
}
