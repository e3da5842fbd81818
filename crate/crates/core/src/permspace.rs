//! Frame-order label space.
//!
//! A clip of `k` frames can be shuffled in `k!` ways. A shuffle and its
//! reversal are indistinguishable for a model that only sees motion, so each
//! pair forms one class and there are `k!/2` classes. Each class is named by
//! the lexicographically smaller member of the pair and classes are sorted by
//! that representative, which makes class ids stable across runs.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::clip::VideoClip;
use crate::error::{Error, Result};

pub const MIN_K: usize = 2;
pub const MAX_K: usize = 8;

/// Frame order using the gather convention: `indices[i]` is the source
/// position of the frame placed at slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let k = indices.len();
        if !(MIN_K..=MAX_K).contains(&k) {
            return Err(Error::invalid(format!(
                "permutation length {k} outside [{MIN_K}, {MAX_K}]"
            )));
        }
        let mut seen = vec![false; k];
        for &i in &indices {
            if i >= k || seen[i] {
                return Err(Error::invalid(format!(
                    "{indices:?} is not a bijection on 0..{k}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self(indices))
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::new((0..k).collect())
    }

    /// Uniform draw over all `k!` orders.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let mut indices: Vec<usize> = (0..k).collect();
        indices.shuffle(rng);
        Self::new(indices)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }

    /// `inverse()[p[i]] == i`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Self(inv)
    }

    /// Lexicographic minimum of the permutation and its reversal.
    pub fn canonical(&self) -> Self {
        let rev = self.reversed();
        if rev < *self {
            rev
        } else {
            self.clone()
        }
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

pub fn invert_permutation(p: &Permutation) -> Permutation {
    p.inverse()
}

/// The `k!/2` reversal-equivalence classes of frame orders.
#[derive(Debug, Clone)]
pub struct OrderClassSpace {
    k: usize,
    classes: Vec<Permutation>,
    index: HashMap<Vec<usize>, usize>,
}

impl OrderClassSpace {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn representatives(&self) -> &[Permutation] {
        &self.classes
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// All `k!` orders in lexicographic order.
pub fn all_permutations(k: usize) -> Result<Vec<Permutation>> {
    if !(MIN_K..=MAX_K).contains(&k) {
        return Err(Error::invalid(format!(
            "clip length k={k} outside supported range [{MIN_K}, {MAX_K}]"
        )));
    }
    let mut cur: Vec<usize> = (0..k).collect();
    let mut out = vec![Permutation(cur.clone())];
    while next_permutation(&mut cur) {
        out.push(Permutation(cur.clone()));
    }
    Ok(out)
}

pub fn enumerate_classes(k: usize) -> Result<OrderClassSpace> {
    let all = all_permutations(k)?;
    // Lexicographic iteration visits each representative before its reversal,
    // so keeping the canonical members in visit order yields a sorted list.
    let classes: Vec<Permutation> = all.into_iter().filter(|p| p.canonical() == *p).collect();
    let index = classes
        .iter()
        .enumerate()
        .map(|(i, p)| (p.0.clone(), i))
        .collect();
    Ok(OrderClassSpace { k, classes, index })
}

pub fn encode(space: &OrderClassSpace, p: &Permutation) -> Result<usize> {
    if p.len() != space.k {
        return Err(Error::invalid(format!(
            "permutation length {} does not match class space k={}",
            p.len(),
            space.k
        )));
    }
    let canonical = p.canonical();
    space
        .index
        .get(&canonical.0)
        .copied()
        .ok_or_else(|| Error::invalid(format!("{p:?} is not a valid permutation")))
}

/// Encodes raw indices, validating bijectivity first.
pub fn encode_indices(space: &OrderClassSpace, indices: &[usize]) -> Result<usize> {
    if indices.len() != space.k {
        return Err(Error::invalid(format!(
            "permutation length {} does not match class space k={}",
            indices.len(),
            space.k
        )));
    }
    encode(space, &Permutation::new(indices.to_vec())?)
}

pub fn decode(space: &OrderClassSpace, class_id: usize) -> Result<Permutation> {
    space.classes.get(class_id).cloned().ok_or_else(|| {
        Error::invalid(format!(
            "class id {class_id} out of range [0, {})",
            space.size()
        ))
    })
}

/// Output slot `i` receives input frame `p[i]`.
pub fn apply_permutation(clip: &VideoClip, p: &Permutation) -> Result<VideoClip> {
    if p.len() != clip.k() {
        return Err(Error::invalid(format!(
            "permutation length {} does not match clip length {}",
            p.len(),
            clip.k()
        )));
    }
    let mut frames = Vec::with_capacity(clip.pixels().len());
    for &src in p.as_slice() {
        frames.extend_from_slice(clip.frame(src));
    }
    Ok(clip.with_pixels(frames))
}
