//! Flat parameter and gradient containers, global-norm clipping, and
//! label-addressable seeded random streams.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named contiguous slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, gap-free partition of `0..len` into named groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    groups: Vec<ParamGroup>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let groups = sizes
            .into_iter()
            .map(|(name, len)| {
                let group = ParamGroup {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                group
            })
            .collect();
        Self {
            groups,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Resolves a flat index to `(group name, index within group)`.
    pub fn locate(&self, index: usize) -> Option<(&str, usize)> {
        self.groups
            .iter()
            .find(|g| index >= g.offset && index < g.offset + g.len)
            .map(|g| (g.name.as_str(), index - g.offset))
    }

    fn non_finite(&self, index: usize) -> Error {
        let (group, index) = self
            .locate(index)
            .map(|(g, i)| (g.to_string(), i))
            .unwrap_or_else(|| ("<ungrouped>".to_string(), index));
        Error::NonFinite { group, index }
    }
}

/// Model parameters. The length is fixed at construction; values are
/// mutable only through slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::invalid(format!(
                "parameter length {} does not match layout length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Single ungrouped vector, handy for scalar problems.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::new([("theta", values.len())]));
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .group(name)
            .map(|g| &self.values[g.offset..g.offset + g.len])
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let g = self.layout.group(name)?.clone();
        Some(&mut self.values[g.offset..g.offset + g.len])
    }
}

/// Gradient with the same partitioning as its parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn zeros_like(params: &ParameterVector) -> Self {
        Self {
            values: vec![0.0; params.len()],
            layout: params.layout.clone(),
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match layout length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::new([("theta", values.len())]));
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(self.layout.non_finite(i)),
            None => Ok(()),
        }
    }
}

/// Euclidean norm over every entry of every group.
pub fn global_norm(g: &GradientVector) -> Result<f64> {
    g.check_finite()?;
    Ok(g.values.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Rescales `g` so its global norm does not exceed `max_norm`. Vectors already
/// under the cap, or over it only by rounding (1e-12 relative), are returned
/// untouched, which makes clipping idempotent.
pub fn clip_global_norm(mut g: GradientVector, max_norm: f64) -> Result<GradientVector> {
    if !(max_norm > 0.0) || !max_norm.is_finite() {
        return Err(Error::invalid(format!(
            "max_norm must be positive and finite, got {max_norm}"
        )));
    }
    let norm = global_norm(&g)?;
    if norm > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / norm;
        g.values.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(g)
}

/// FNV-1a; fixed so stream ids do not depend on the std hasher.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic random stream addressed by `(seed, label)`.
///
/// Backed by ChaCha8 with the label hash as the stream id, so distinct labels
/// under one seed never share keystream and every platform sees the same
/// sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(label_hash(&label));
        Self {
            seed,
            label,
            counter: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32/64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.counter += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.counter += 1;
        self.inner.fill_bytes(dst)
    }
}

/// Uniform draw from a non-empty ordered set.
pub fn uniform_choice<T: Clone>(rng: &mut RngStream, items: &[T]) -> Result<T> {
    if items.is_empty() {
        return Err(Error::invalid("uniform_choice over an empty set"));
    }
    Ok(items[rng.below(items.len())].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn norm_examples() {
        assert_eq!(
            global_norm(&GradientVector::flat(vec![3.0, 4.0])).unwrap(),
            5.0
        );
        assert_eq!(
            global_norm(&GradientVector::flat(vec![0.0; 10])).unwrap(),
            0.0
        );
        assert_eq!(
            global_norm(&GradientVector::flat(vec![1.0; 4])).unwrap(),
            2.0
        );
    }

    #[test]
    fn norm_names_group_of_bad_entry() {
        let layout = Arc::new(Layout::new([("w1", 2), ("b1", 3)]));
        let g = GradientVector::from_values(layout, vec![0.0, 1.0, 2.0, f64::NAN, 0.0]).unwrap();
        match global_norm(&g) {
            Err(Error::NonFinite { group, index }) => {
                assert_eq!(group, "b1");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn clip_examples() {
        let c = clip_global_norm(GradientVector::flat(vec![3.0, 4.0]), 2.0).unwrap();
        assert_relative_eq!(c.as_slice()[0], 1.2, max_relative = 1e-15);
        assert_relative_eq!(c.as_slice()[1], 1.6, max_relative = 1e-15);

        let c = clip_global_norm(GradientVector::flat(vec![0.5, 0.5]), 2.0).unwrap();
        assert_eq!(c.as_slice(), &[0.5, 0.5]);

        let c = clip_global_norm(GradientVector::flat(vec![0.0; 3]), 0.1).unwrap();
        assert_eq!(c.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn clip_rejects_bad_input() {
        assert!(clip_global_norm(GradientVector::flat(vec![1.0]), 0.0).is_err());
        assert!(clip_global_norm(GradientVector::flat(vec![f64::INFINITY]), 1.0).is_err());
    }

    #[test]
    fn layout_partitions_cover_range() {
        let layout = Layout::new([("a", 3), ("b", 0), ("c", 2)]);
        assert_eq!(layout.len(), 5);
        let mut next = 0;
        for g in layout.groups() {
            assert_eq!(g.offset, next);
            next += g.len;
        }
        assert_eq!(next, layout.len());
        assert_eq!(layout.locate(3), Some(("c", 0)));
    }

    #[test]
    fn choice_singleton_and_empty() {
        let mut rng = RngStream::new(1, "selection");
        for _ in 0..10 {
            assert_eq!(uniform_choice(&mut rng, &["a"]).unwrap(), "a");
        }
        assert!(uniform_choice::<u8>(&mut rng, &[]).is_err());
    }

    #[test]
    fn choice_frequencies_within_band() {
        let mut rng = RngStream::new(2746317213, "selection");
        let items = ['a', 'b', 'c', 'd', 'e', 'f'];
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            let c = uniform_choice(&mut rng, &items).unwrap();
            counts[items.iter().position(|&x| x == c).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 60_000.0;
            assert!((0.146..=0.187).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn streams_are_label_addressed() {
        let draw = |seed, label: &str| {
            let mut r = RngStream::new(seed, label);
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7, "selection"), draw(7, "selection"));
        assert_ne!(draw(7, "selection"), draw(7, "data"));
        assert_ne!(draw(7, "selection"), draw(8, "selection"));
    }

    #[test]
    fn stream_is_platform_stable() {
        // Frozen first words; a change here breaks reproducibility of stored suites.
        let mut r = RngStream::new(42, "selection");
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(
            first,
            [
                10214158843811991835,
                17382764365209421542,
                15839101495035652641
            ]
        );
        let mut again = RngStream::new(42, "selection");
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(r.counter(), 3);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_preserves_direction(
            v in prop::collection::vec(-50.0f64..50.0, 1..20),
            max in 0.01f64..10.0,
        ) {
            let g = GradientVector::flat(v.clone());
            let norm = global_norm(&g).unwrap();
            let once = clip_global_norm(g, max).unwrap();
            let twice = clip_global_norm(once.clone(), max).unwrap();
            prop_assert_eq!(once.as_slice(), twice.as_slice());

            let clipped_norm = global_norm(&once).unwrap();
            let expected = norm.min(max);
            prop_assert!((clipped_norm - expected).abs() <= 2e-12 * expected.max(1e-300));

            if norm > 0.0 {
                let scale = clipped_norm / norm;
                for (a, b) in v.iter().zip(once.as_slice()) {
                    prop_assert!((a * scale - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }
}
