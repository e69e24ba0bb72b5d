//! Shared fixtures for the criterion benches.

use spincorr_core::geometry::sample_uniform_direction;
use spincorr_core::{Mark, Post, RandomStream, Side, UnitVec};

/// Random marks on both posts, ids `l0..` and `r0..`.
pub fn random_posts(n_left: usize, n_right: usize, seed: u64) -> (Post, Post) {
    let mut rng = RandomStream::new(seed);
    let mut post = |side: Side, prefix: &str, n: usize| {
        let marks = (0..n)
            .map(|i| Mark::new(format!("{prefix}{i}"), sample_uniform_direction(&mut rng)))
            .collect();
        Post::new(side, marks).expect("distinct ids")
    };
    let left = post(Side::Left, "l", n_left);
    let right = post(Side::Right, "r", n_right);
    (left, right)
}

pub fn orientations(post: &Post) -> Vec<UnitVec> {
    post.marks().iter().map(|m| m.orientation).collect()
}
