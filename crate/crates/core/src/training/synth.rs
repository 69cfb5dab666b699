//! Seeded synthetic corpus with tunable intrinsic and social signal.
//!
//! Vocabulary layout: token 0 is padding, then [`SHARED_TOKENS`] tokens used
//! by both classes, then [`CLASS_TOKENS`] post tokens per class, then
//! [`CLASS_TOKENS`] comment tokens per class.
//!
//! * Text: each post token is class specific with probability
//!   `separation / (separation + 5)`, otherwise shared.
//! * Visual: `d_v = d`; class means are `±(separation/2)·u` for a random
//!   unit vector `u`, plus unit Gaussian noise whose component along `u`
//!   is truncated to `|·| < 0.45·separation`, so the two classes are
//!   linearly separable whenever `separation > 0`.
//! * Social: `n/6` users, alternately affiliated with class 0 and 1, post
//!   authors drawn uniformly. Each post gets 1 to 4 comments; with
//!   probability `1 − graph_noise` a comment is informative (written by a
//!   same-class user, tokens class specific with probability 0.7),
//!   otherwise it comes from a random user with shared tokens only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{CommentRecord, PostRecord, UserRecord};
use crate::error::{Error, Result};

use super::data::DatasetBundle;

pub const SHARED_TOKENS: usize = 120;
pub const CLASS_TOKENS: usize = 40;
const MIN_LEN: usize = 8;
const MAX_LEN: usize = 16;
const COMMENT_SIGNAL: f64 = 0.7;

/// Total vocabulary size of every synthetic corpus, padding included.
pub const fn synthetic_vocab_size() -> usize {
    1 + SHARED_TOKENS + 4 * CLASS_TOKENS
}

fn shared_token(rng: &mut ChaCha8Rng) -> usize {
    1 + rng.gen_range(0..SHARED_TOKENS)
}

fn post_token(rng: &mut ChaCha8Rng, class: u8) -> usize {
    1 + SHARED_TOKENS + class as usize * CLASS_TOKENS + rng.gen_range(0..CLASS_TOKENS)
}

fn comment_token(rng: &mut ChaCha8Rng, class: u8) -> usize {
    1 + SHARED_TOKENS
        + 2 * CLASS_TOKENS
        + class as usize * CLASS_TOKENS
        + rng.gen_range(0..CLASS_TOKENS)
}

fn tokens(
    rng: &mut ChaCha8Rng,
    signal: f64,
    mut specific: impl FnMut(&mut ChaCha8Rng) -> usize,
) -> Vec<usize> {
    let len = rng.gen_range(MIN_LEN..=MAX_LEN);
    (0..len)
        .map(|_| {
            if rng.gen_bool(signal) {
                specific(rng)
            } else {
                shared_token(rng)
            }
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_synthetic(
    n: usize,
    d: usize,
    separation: f64,
    graph_noise: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if n < 20 {
        return Err(Error::invalid(format!(
            "synthetic corpus needs n >= 20, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::invalid("synthetic corpus needs d > 0"));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::invalid(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    if !(0.0..=1.0).contains(&graph_noise) {
        return Err(Error::invalid(format!(
            "graph_noise must lie in [0, 1], got {graph_noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut u: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);

    let n_users = (n / 6).max(2);
    let users: Vec<UserRecord> = (0..n_users)
        .map(|j| UserRecord {
            id: format!("u{j}"),
        })
        .collect();
    let by_class: [Vec<usize>; 2] = [
        (0..n_users).filter(|j| j % 2 == 0).collect(),
        (0..n_users).filter(|j| j % 2 == 1).collect(),
    ];

    let text_signal = separation / (separation + 5.0);
    let half = separation / 2.0;
    let mut posts = Vec::with_capacity(n);
    let mut comments = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u8;
        let post_tokens = tokens(&mut rng, text_signal, |r| post_token(r, label));

        let noise: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let along: f64 = noise.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut kept = along;
        if separation > 0.0 {
            while kept.abs() >= 0.9 * half {
                kept = gaussian(&mut rng);
            }
        }
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let visual_feat: Vec<f64> = noise
            .iter()
            .zip(&u)
            .map(|(z, ui)| z + (kept - along + sign * half) * ui)
            .collect();

        let author = rng.gen_range(0..n_users);
        let post_id = format!("p{i}");
        let mut comment_ids = Vec::new();
        for k in 0..rng.gen_range(1..=4) {
            let id = format!("c{i}_{k}");
            let (user, toks) = if rng.gen_bool(1.0 - graph_noise) {
                let pool = &by_class[label as usize];
                let user = pool[rng.gen_range(0..pool.len())];
                (
                    user,
                    tokens(&mut rng, COMMENT_SIGNAL, |r| comment_token(r, label)),
                )
            } else {
                (
                    rng.gen_range(0..n_users),
                    tokens(&mut rng, 0.0, shared_token),
                )
            };
            comments.push(CommentRecord {
                id: id.clone(),
                tokens: toks,
                user_id: users[user].id.clone(),
                post_id: post_id.clone(),
            });
            comment_ids.push(id);
        }
        posts.push(PostRecord {
            id: post_id,
            tokens: post_tokens,
            visual_feat,
            user_id: users[author].id.clone(),
            comment_ids,
            label,
        });
    }
    Ok(DatasetBundle::new(posts, comments, users))
}
