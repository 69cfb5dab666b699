//! Line-delimited JSON ingestion and the stratified train/val/test split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::{CommentRecord, PostRecord, UserRecord};
use crate::error::{Error, Result};

use super::config::SplitFractions;

pub const POSTS_FILE: &str = "posts.jsonl";
pub const COMMENTS_FILE: &str = "comments.jsonl";
pub const USERS_FILE: &str = "users.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "valid" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// The corpus records plus the split each post belongs to.
///
/// `assignment` is parallel to `posts`; it stays empty until
/// [`split_dataset`] has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub posts: Vec<PostRecord>,
    pub comments: Vec<CommentRecord>,
    pub users: Vec<UserRecord>,
    pub assignment: Vec<Split>,
}

impl DatasetBundle {
    pub fn new(
        posts: Vec<PostRecord>,
        comments: Vec<CommentRecord>,
        users: Vec<UserRecord>,
    ) -> Self {
        Self {
            posts,
            comments,
            users,
            assignment: Vec::new(),
        }
    }

    /// Indices into `posts` assigned to `split`, in post order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.posts.iter().map(|p| p.label).collect()
    }

    pub fn visual_dim(&self) -> Result<usize> {
        self.posts
            .first()
            .map(|p| p.visual_feat.len())
            .ok_or_else(|| Error::invalid("dataset has no posts"))
    }

    /// Smallest vocabulary covering every token in posts and comments.
    pub fn vocab_size(&self) -> usize {
        let posts = self.posts.iter().flat_map(|p| p.tokens.iter());
        let comments = self.comments.iter().flat_map(|c| c.tokens.iter());
        posts.chain(comments).copied().max().map_or(1, |m| m + 1)
    }

    /// Checks labels and feature dimensions.
    pub fn validate(&self) -> Result<()> {
        let dv = self.visual_dim()?;
        for p in &self.posts {
            if p.label > 1 {
                return Err(Error::invalid(format!(
                    "post `{}` has label {} outside {{0, 1}}",
                    p.id, p.label
                )));
            }
            if p.visual_feat.len() != dv {
                return Err(Error::invalid(format!(
                    "post `{}` has {} visual features, expected {dv}",
                    p.id,
                    p.visual_feat.len()
                )));
            }
            if p.visual_feat.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "post `{}` has non-finite visual features",
                    p.id
                )));
            }
            if p.tokens.is_empty() {
                return Err(Error::invalid(format!("post `{}` has no tokens", p.id)));
            }
        }
        if !self.assignment.is_empty() && self.assignment.len() != self.posts.len() {
            return Err(Error::invalid("split assignment does not cover every post"));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bundle = Self::new(
            read_jsonl(&dir.join(POSTS_FILE))?,
            read_jsonl(&dir.join(COMMENTS_FILE))?,
            read_jsonl(&dir.join(USERS_FILE))?,
        );
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(POSTS_FILE), &self.posts)?;
        write_jsonl(&dir.join(COMMENTS_FILE), &self.comments)?;
        write_jsonl(&dir.join(USERS_FILE), &self.users)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Target sizes `floor(f_train N)`, `floor(f_val N)` and the remainder.
pub fn split_sizes(n: usize, fractions: &SplitFractions) -> (usize, usize, usize) {
    let train = (fractions.train * n as f64 + 1e-9).floor() as usize;
    let val = ((fractions.val * n as f64 + 1e-9).floor() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Splits `counts` (one per class) so the parts sum to `total`, each part
/// proportional to its class count, using largest-remainder rounding.
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total as f64 / n as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[k] < counts[k] {
            out[k] += 1;
            left -= 1;
        }
    }
    out
}

/// Stratified split of `posts` into train/val/test.
///
/// Split sizes follow [`split_sizes`]. Within each label, the first
/// `train` and `train + val` cut points are apportioned cumulatively, so
/// every split holds each label within one sample of its proportional share.
pub fn split_dataset(
    mut bundle: DatasetBundle,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<DatasetBundle> {
    fractions.validate()?;
    let n = bundle.posts.len();
    let (n_train, n_val, n_test) = split_sizes(n, fractions);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "split of {n} posts leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in bundle.posts.iter().enumerate() {
        if p.label > 1 {
            return Err(Error::invalid(format!(
                "post `{}` has label {}",
                p.id, p.label
            )));
        }
        by_class[p.label as usize].push(i);
    }
    let counts = [by_class[0].len(), by_class[1].len()];
    let cut_train = apportion(&counts, n_train);
    let cut_val = apportion(&counts, n_train + n_val);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Test; n];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        for (rank, &i) in members.iter().enumerate() {
            assignment[i] = if rank < cut_train[c] {
                Split::Train
            } else if rank < cut_val[c].max(cut_train[c]) {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    bundle.assignment = assignment;
    Ok(bundle)
}
