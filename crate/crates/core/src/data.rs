//! Rotated two-moons domains, standardization and batching.
//!
//! Trainers only ever see a [`UdaView`]: the labeled source plus the unlabeled
//! intermediate and target-train features. Hidden labels stay inside
//! [`DomainTriplet`] and every read through an oracle accessor is counted, so
//! tests can assert that an adaptation run never touched them.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centre of the noiseless two-moons manifold; rotations pivot here.
pub const ROTATION_CENTRE: (f64, f64) = (0.5, 0.25);

pub const STD_FLOOR: f64 = 1e-8;

/// Mixes `tags` into `base` (splitmix64 finalizer per step).
pub fn sub_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    x: Tensor,
    y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_set",
                left: x.shape(),
                right: (y.len(), 1),
            });
        }
        Ok(LabeledSet { x, y })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet { x: self.x.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    x: Tensor,
}

impl UnlabeledSet {
    pub fn new(x: Tensor) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Empty("unlabeled set"));
        }
        Ok(UnlabeledSet { x })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Two interleaving half circles; the first `ceil(n/2)` points are class 0.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<LabeledSet> {
    if n < 2 {
        return Err(Error::invalid(format!("make_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n / 2;
    let spaced = |count: usize, i: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = spaced(n_outer, i);
        data.extend_from_slice(&[t.cos(), t.sin()]);
        y.push(0);
    }
    for i in 0..n_inner {
        let t = spaced(n_inner, i);
        data.extend_from_slice(&[1.0 - t.cos(), 0.5 - t.sin()]);
        y.push(1);
    }
    if noise > 0.0 {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    LabeledSet::new(Tensor::new(n, 2, data)?, y)
}

/// Rotates 2-D points counterclockwise by `degrees` about [`ROTATION_CENTRE`].
pub fn rotate_points(x: &Tensor, degrees: f64) -> Result<Tensor> {
    if x.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "rotate",
            left: x.shape(),
            right: (x.rows(), 2),
        });
    }
    if degrees == 0.0 {
        return Ok(x.clone());
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ROTATION_CENTRE;
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let (dx, dy) = (x.get(r, 0) - cx, x.get(r, 1) - cy);
        data.push(cx + c * dx - s * dy);
        data.push(cy + s * dx + c * dy);
    }
    Tensor::new(x.rows(), 2, data)
}

pub trait Rotate: Sized {
    fn rotate(&self, degrees: f64) -> Result<Self>;
}

impl Rotate for LabeledSet {
    fn rotate(&self, degrees: f64) -> Result<Self> {
        LabeledSet::new(rotate_points(&self.x, degrees)?, self.y.clone())
    }
}

impl Rotate for UnlabeledSet {
    fn rotate(&self, degrees: f64) -> Result<Self> {
        UnlabeledSet::new(rotate_points(&self.x, degrees)?)
    }
}

/// How target-domain points are split between unlabeled training input and labeled evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetSplit {
    /// Training and test features coincide (the toy-data protocol).
    #[default]
    Identical,
    /// A seeded 50/50 split.
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub n_per_domain: usize,
    pub a_degrees: f64,
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub target_split: TargetSplit,
    #[serde(default)]
    pub standardize: bool,
}

impl TripletSpec {
    pub fn new(n_per_domain: usize, a_degrees: f64, noise: f64, seed: u64) -> Self {
        TripletSpec {
            n_per_domain,
            a_degrees,
            noise,
            seed,
            target_split: TargetSplit::Identical,
            standardize: false,
        }
    }
}

/// The labeled and unlabeled views an adaptation trainer is allowed to see.
#[derive(Clone, Copy, Debug)]
pub struct UdaView<'a> {
    pub source: &'a LabeledSet,
    pub intermediate: &'a UnlabeledSet,
    pub target_train: &'a UnlabeledSet,
}

#[derive(Debug)]
pub struct DomainTriplet {
    source: LabeledSet,
    intermediate: UnlabeledSet,
    target_train: UnlabeledSet,
    hidden_intermediate_labels: Vec<usize>,
    hidden_target_train_labels: Vec<usize>,
    target_test: LabeledSet,
    oracle_reads: AtomicUsize,
}

impl Clone for DomainTriplet {
    fn clone(&self) -> Self {
        DomainTriplet {
            source: self.source.clone(),
            intermediate: self.intermediate.clone(),
            target_train: self.target_train.clone(),
            hidden_intermediate_labels: self.hidden_intermediate_labels.clone(),
            hidden_target_train_labels: self.hidden_target_train_labels.clone(),
            target_test: self.target_test.clone(),
            oracle_reads: AtomicUsize::new(0),
        }
    }
}

impl DomainTriplet {
    /// Assembles a triplet from fully labeled sets; the intermediate and target-train labels become hidden.
    pub fn from_parts(
        source: LabeledSet,
        intermediate: LabeledSet,
        target_train: LabeledSet,
        target_test: LabeledSet,
    ) -> Result<Self> {
        for (name, len) in [
            ("source", source.len()),
            ("intermediate", intermediate.len()),
            ("target_train", target_train.len()),
            ("target_test", target_test.len()),
        ] {
            if len == 0 {
                return Err(Error::invalid(format!("{name} set is empty")));
            }
        }
        Ok(DomainTriplet {
            intermediate: UnlabeledSet { x: intermediate.x },
            hidden_intermediate_labels: intermediate.y,
            target_train: UnlabeledSet { x: target_train.x },
            hidden_target_train_labels: target_train.y,
            source,
            target_test,
            oracle_reads: AtomicUsize::new(0),
        })
    }

    pub fn uda_view(&self) -> UdaView<'_> {
        UdaView {
            source: &self.source,
            intermediate: &self.intermediate,
            target_train: &self.target_train,
        }
    }

    pub fn source(&self) -> &LabeledSet {
        &self.source
    }

    pub fn intermediate(&self) -> &UnlabeledSet {
        &self.intermediate
    }

    pub fn target_train(&self) -> &UnlabeledSet {
        &self.target_train
    }

    fn count_read(&self) {
        self.oracle_reads.fetch_add(1, Ordering::SeqCst);
    }

    /// Number of hidden-label reads performed so far.
    pub fn oracle_reads(&self) -> usize {
        self.oracle_reads.load(Ordering::SeqCst)
    }

    /// Labeled evaluation set. Counts as an oracle read.
    pub fn target_test(&self) -> &LabeledSet {
        self.count_read();
        &self.target_test
    }

    /// Target-train features with their hidden labels. Counts as an oracle read.
    pub fn oracle_target_train(&self) -> LabeledSet {
        self.count_read();
        LabeledSet {
            x: self.target_train.x.clone(),
            y: self.hidden_target_train_labels.clone(),
        }
    }

    /// Intermediate features with their hidden labels. Counts as an oracle read.
    pub fn oracle_intermediate(&self) -> LabeledSet {
        self.count_read();
        LabeledSet {
            x: self.intermediate.x.clone(),
            y: self.hidden_intermediate_labels.clone(),
        }
    }

    /// Standardizes every set with statistics of the training-visible features.
    pub fn standardized(&self) -> Result<DomainTriplet> {
        let st = Standardizer::fit(&[self.source.x(), self.intermediate.x(), self.target_train.x()])?;
        Ok(DomainTriplet {
            source: LabeledSet::new(st.apply(self.source.x())?, self.source.y.clone())?,
            intermediate: UnlabeledSet::new(st.apply(self.intermediate.x())?)?,
            target_train: UnlabeledSet::new(st.apply(self.target_train.x())?)?,
            hidden_intermediate_labels: self.hidden_intermediate_labels.clone(),
            hidden_target_train_labels: self.hidden_target_train_labels.clone(),
            target_test: LabeledSet::new(st.apply(self.target_test.x())?, self.target_test.y.clone())?,
            oracle_reads: AtomicUsize::new(0),
        })
    }

    /// Writes every point as `x1,x2,y,domain`. Reads hidden labels, so it counts as an oracle read.
    pub fn write_csv<W: Write>(&self, out: W, include_test: bool) -> Result<()> {
        self.count_read();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["x1", "x2", "y", "domain"]).map_err(io)?;
        let mut emit = |x: &Tensor, y: &[usize], domain: &str| -> Result<()> {
            for r in 0..x.rows() {
                let row = x.row(r);
                let mut rec = row.iter().map(|v| v.to_string()).collect::<Vec<_>>();
                rec.push(y[r].to_string());
                rec.push(domain.to_string());
                w.write_record(&rec).map_err(io)?;
            }
            Ok(())
        };
        emit(self.source.x(), self.source.y(), "source")?;
        emit(self.intermediate.x(), &self.hidden_intermediate_labels, "intermediate")?;
        emit(self.target_train.x(), &self.hidden_target_train_labels, "target_train")?;
        if include_test {
            emit(self.target_test.x(), self.target_test.y(), "target_test")?;
        }
        w.flush().map_err(|e| Error::invalid(format!("io: {e}")))?;
        Ok(())
    }
}

/// Source at 0 degrees, intermediate at `a`, target at `2a`, each sampled with its own sub-seed.
pub fn build_triplet(n_per_domain: usize, a_degrees: f64, noise: f64, seed: u64) -> Result<DomainTriplet> {
    build_triplet_with(&TripletSpec::new(n_per_domain, a_degrees, noise, seed))
}

pub fn build_triplet_with(spec: &TripletSpec) -> Result<DomainTriplet> {
    let n = spec.n_per_domain;
    let source = make_moons(n, spec.noise, sub_seed(spec.seed, &[0]))?;
    let intermediate = make_moons(n, spec.noise, sub_seed(spec.seed, &[1]))?.rotate(spec.a_degrees)?;
    let target = make_moons(n, spec.noise, sub_seed(spec.seed, &[2]))?.rotate(2.0 * spec.a_degrees)?;
    let (target_train, target_test) = match spec.target_split {
        TargetSplit::Identical => (target.clone(), target),
        TargetSplit::Half => {
            if target.len() < 2 {
                return Err(Error::invalid("half split needs at least 2 target points"));
            }
            let mut idx: Vec<usize> = (0..target.len()).collect();
            idx.shuffle(&mut rng_from(sub_seed(spec.seed, &[3])));
            let half = target.len() / 2;
            (target.subset(&idx[..half]), target.subset(&idx[half..]))
        }
    };
    let triplet = DomainTriplet::from_parts(source, intermediate, target_train, target_test)?;
    if spec.standardize {
        triplet.standardized()
    } else {
        Ok(triplet)
    }
}

/// Per-feature mean and standard deviation (population) fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(parts: &[&Tensor]) -> Result<Self> {
        let all = Tensor::concat_rows(parts)?;
        if all.rows() == 0 {
            return Err(Error::Empty("standardizer fit"));
        }
        let mean = all.mean_rows().into_data();
        let n = all.rows() as f64;
        let mut var = vec![0.0; all.cols()];
        for r in 0..all.rows() {
            for (c, v) in all.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                left: x.shape(),
                right: (1, self.mean.len()),
            });
        }
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                data.push((v - self.mean[c]) / self.std[c]);
            }
        }
        Tensor::new(x.rows(), x.cols(), data)
    }
}

/// Fits on `fit_on` and transforms every tensor in `apply_to` with the same statistics.
pub fn standardize_fit_apply(fit_on: &[&Tensor], apply_to: &[&Tensor]) -> Result<(Standardizer, Vec<Tensor>)> {
    let st = Standardizer::fit(fit_on)?;
    let out = apply_to.iter().map(|t| st.apply(t)).collect::<Result<Vec<_>>>()?;
    Ok((st, out))
}

/// One epoch of shuffled index batches; the incomplete final batch is dropped.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    Ok(idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless stream of shuffled index batches over `n` items; reshuffles once fewer than a batch remain.
#[derive(Debug)]
pub struct CyclingBatcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl CyclingBatcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={n}")));
        }
        let mut rng = rng_from(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(CyclingBatcher {
            order,
            pos: 0,
            batch_size,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_generator_endpoints() {
        let m = make_moons(10, 0.0, 0).unwrap();
        assert_eq!(m.x().row(0), &[1.0, 0.0]);
        assert_eq!(m.y()[0], 0);
        assert_eq!(m.x().row(5), &[0.0, 0.5]);
        assert_eq!(m.y()[5], 1);
    }

    #[test]
    fn odd_count_gives_extra_point_to_class_zero() {
        let m = make_moons(7, 0.0, 0).unwrap();
        assert_eq!(m.y().iter().filter(|&&y| y == 0).count(), 4);
        assert_eq!(m.y().iter().filter(|&&y| y == 1).count(), 3);
        assert!(make_moons(1, 0.0, 0).is_err());
        assert!(make_moons(4, -0.1, 0).is_err());
    }

    #[test]
    fn noisy_mean_close_to_noiseless_mean() {
        let clean = make_moons(200, 0.0, 0).unwrap().x().mean_rows();
        let noisy = make_moons(200, 0.1, 42).unwrap().x().mean_rows();
        assert!(clean.max_abs_diff(&noisy) < 0.05);
    }

    #[test]
    fn rotation_examples() {
        let p = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let r = rotate_points(&p, 180.0).unwrap();
        assert!((r.get(0, 0) - 0.0).abs() < 1e-12 && (r.get(0, 1) - 0.5).abs() < 1e-12);
        assert_eq!(rotate_points(&p, 0.0).unwrap(), p);
        let q = rotate_points(&rotate_points(&p, 37.0).unwrap(), -37.0).unwrap();
        assert!(q.max_abs_diff(&p) < 1e-12);
        assert!(rotate_points(&Tensor::zeros(2, 3), 10.0).is_err());
    }

    #[test]
    fn rotation_is_counterclockwise() {
        // (1, 0.25) sits due east of the centre; +90 degrees moves it due north.
        let p = Tensor::from_rows(&[[1.0, 0.25]]).unwrap();
        let r = rotate_points(&p, 90.0).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12 && (r.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn triplet_rotations_and_labels() {
        let t = build_triplet(50, 30.0, 0.0, 9).unwrap();
        let src = t.source().x().clone();
        let want_inter = rotate_points(&src, 30.0).unwrap();
        let want_target = rotate_points(&src, 60.0).unwrap();
        assert!(t.intermediate().x().max_abs_diff(&want_inter) < 1e-12);
        assert!(t.target_train().x().max_abs_diff(&want_target) < 1e-12);
        assert_eq!(t.oracle_target_train().y(), t.source().y());
        assert_eq!(t.target_test().x(), t.target_train().x());
        assert_eq!(t.oracle_reads(), 2);
    }

    #[test]
    fn zero_angle_noiseless_domains_coincide() {
        let t = build_triplet(40, 0.0, 0.0, 3).unwrap();
        let sorted = |x: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows
        };
        assert_eq!(sorted(t.source().x()), sorted(t.intermediate().x()));
        assert_eq!(sorted(t.source().x()), sorted(t.target_train().x()));
    }

    #[test]
    fn half_split_partitions_target() {
        let mut spec = TripletSpec::new(41, 20.0, 0.1, 1);
        spec.target_split = TargetSplit::Half;
        let t = build_triplet_with(&spec).unwrap();
        assert_eq!(t.target_train().len(), 20);
        assert_eq!(t.target_test().len(), 21);
    }

    #[test]
    fn standardizer_by_hand() {
        // column 0: [1, 2, 3] -> mean 2, population std sqrt(2/3)
        // column 1: [5, 5, 5] -> mean 5, std floored at 1e-8
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let (st, out) = standardize_fit_apply(&[&x], &[&x]).unwrap();
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(st.std[1], STD_FLOOR);
        assert!(out[0].data().chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn standardized_data_is_fixed_point() {
        let x = Tensor::from_rows(&[[-1.0, 1.0], [1.0, -1.0]]).unwrap();
        let (_, out) = standardize_fit_apply(&[&x], &[&x]).unwrap();
        assert!(out[0].max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn batches_drop_incomplete_tail() {
        let b = batch_iter(64, 32, 0).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        let b = batch_iter(65, 32, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.concat().len(), 64);
        assert_eq!(batch_iter(65, 32, 5).unwrap(), batch_iter(65, 32, 5).unwrap());
        assert!(batch_iter(10, 0, 0).is_err());
    }

    #[test]
    fn cycling_batcher_covers_each_epoch() {
        let mut b = CyclingBatcher::new(10, 5, 1).unwrap();
        let mut first: Vec<usize> = b.next_batch().to_vec();
        first.extend_from_slice(b.next_batch());
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(CyclingBatcher::new(3, 4, 0).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let t = build_triplet(4, 15.0, 0.0, 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "x1,x2,y,domain");
        assert_eq!(lines.len(), 1 + 12 + 1);
        assert!(!text.contains('\r'));
        assert!(lines[1].ends_with(",0,source"));
    }
}
