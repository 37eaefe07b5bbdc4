//! Attribution metrics over saliency maps: top-k critical sets, regional mass
//! ratios, the nuisance mass ratio (nmr@k), the mass-weighted nuisance
//! fraction, and the comparison kernels (cosine, action MSE, Pearson) used by
//! the robustness, fidelity and correlation protocols.
//!
//! Two different regional measures live here and reports always say which:
//!
//! * [`regional_mass_ratio`] / [`nmr`] count pixels: `|H ∩ R| / |H|` where `H`
//!   is the critical set.
//! * [`mass_fraction`] / [`nuisance_mass_fraction`] weight by saliency:
//!   `Σ_R S / Σ S`.
//!
//! They agree on uniform maps and differ otherwise.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iss::ActionVector;
use crate::tensor::ScalarField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Manipulator and end effector.
    Act,
    /// Task objects and support surfaces.
    Sup,
    /// Everything the task does not depend on.
    Nuis,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Act, Label::Sup, Label::Nuis];

    /// Value used in partition PGM files.
    pub fn code(self) -> u8 {
        match self {
            Label::Act => 1,
            Label::Sup => 2,
            Label::Nuis => 3,
        }
    }

    pub fn from_code(v: u8) -> Option<Label> {
        match v {
            1 => Some(Label::Act),
            2 => Some(Label::Sup),
            3 => Some(Label::Nuis),
            _ => None,
        }
    }
}

/// Disjoint, covering per-pixel labelling of one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticPartition {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl SemanticPartition {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::dims(format!(
                "partition has {} labels for {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn uniform(width: usize, height: usize, label: Label) -> Result<Self> {
        Self::new(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Fraction of pixels carrying `label`.
    pub fn fraction(&self, label: Label) -> f64 {
        self.count(label) as f64 / self.labels.len() as f64
    }

    /// Hard `{0, 1}` indicator of `label`.
    pub fn region_mask(&self, label: Label) -> ScalarField {
        self.mask_of(|l| l == label)
    }

    pub fn mask_of(&self, pred: impl Fn(Label) -> bool) -> ScalarField {
        let data = self.labels.iter().map(|&l| if pred(l) { 1.0 } else { 0.0 }).collect();
        ScalarField::new(self.width, self.height, data).expect("dims checked at construction")
    }
}

fn check_same_dims(map: &ScalarField, partition: &SemanticPartition) -> Result<()> {
    if map.dims() != partition.dims() {
        return Err(Error::dims(format!(
            "map {:?} vs partition {:?}",
            map.dims(),
            partition.dims()
        )));
    }
    Ok(())
}

/// Minimal importance-descending prefix covering `k%` of the total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSet {
    pub k_percent: f64,
    /// Pixel indices in selection order.
    pub indices: Vec<usize>,
    pub mass_covered: f64,
    pub total_mass: f64,
}

impl CriticalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.contains(&idx)
    }
}

/// Pixel indices sorted by value descending, ties by ascending index.
fn importance_order(map: &ScalarField) -> Vec<usize> {
    let data = map.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    order
}

/// Top-k% critical set. The total is accumulated along the sorted order, so
/// `k = 100` covers exactly the nonzero support.
pub fn critical_set(map: &ScalarField, k_percent: f64) -> Result<CriticalSet> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::param(format!("k must lie in (0, 100], got {k_percent}")));
    }
    if let Some(v) = map.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::param(format!("saliency map has negative value {v}")));
    }
    let order = importance_order(map);
    let data = map.data();
    let total: f64 = order.iter().map(|&i| data[i] as f64).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("saliency map has zero total mass".into()));
    }
    let threshold = k_percent / 100.0 * total;
    let mut covered = 0.0f64;
    let mut indices = Vec::new();
    for &i in &order {
        indices.push(i);
        covered += data[i] as f64;
        if covered >= threshold {
            break;
        }
    }
    Ok(CriticalSet {
        k_percent,
        indices,
        mass_covered: covered,
        total_mass: total,
    })
}

/// `|H ∩ R| / |H|` for the top-k% critical set `H`.
pub fn regional_mass_ratio(
    map: &ScalarField,
    partition: &SemanticPartition,
    region: Label,
    k_percent: f64,
) -> Result<f64> {
    check_same_dims(map, partition)?;
    let set = critical_set(map, k_percent)?;
    Ok(region_share(&set, partition, region))
}

fn region_share(set: &CriticalSet, partition: &SemanticPartition, region: Label) -> f64 {
    let hits = set
        .indices
        .iter()
        .filter(|&&i| partition.labels()[i] == region)
        .count();
    hits as f64 / set.len() as f64
}

/// Nuisance mass ratio: the regional mass ratio of the nuisance region.
pub fn nmr(map: &ScalarField, partition: &SemanticPartition, k_percent: f64) -> Result<f64> {
    regional_mass_ratio(map, partition, Label::Nuis, k_percent)
}

/// Count-based ratios for all three regions from one critical set.
pub fn regional_mass_ratios(
    map: &ScalarField,
    partition: &SemanticPartition,
    k_percent: f64,
) -> Result<[f64; 3]> {
    check_same_dims(map, partition)?;
    let set = critical_set(map, k_percent)?;
    Ok(Label::ALL.map(|l| region_share(&set, partition, l)))
}

/// Share of total saliency mass inside `region`.
pub fn mass_fraction(map: &ScalarField, partition: &SemanticPartition, region: Label) -> Result<f64> {
    Ok(mass_fractions(map, partition)?[region as usize])
}

/// Mass-weighted `[act, sup, nuis]` shares; they sum to one.
pub fn mass_fractions(map: &ScalarField, partition: &SemanticPartition) -> Result<[f64; 3]> {
    check_same_dims(map, partition)?;
    let mut per = [0.0f64; 3];
    for (&v, &l) in map.data().iter().zip(partition.labels()) {
        if v < 0.0 {
            return Err(Error::param(format!("saliency map has negative value {v}")));
        }
        per[l as usize] += v as f64;
    }
    let total = per[0] + per[1] + per[2];
    if total <= 0.0 {
        return Err(Error::Degenerate("saliency map has zero total mass".into()));
    }
    Ok(per.map(|m| m / total))
}

pub fn nuisance_mass_fraction(map: &ScalarField, partition: &SemanticPartition) -> Result<f64> {
    mass_fraction(map, partition, Label::Nuis)
}

pub fn cosine_similarity(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm map".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of squared componentwise differences over every action value,
/// including every chunk step.
pub fn action_mse(a: &ActionVector, b: &ActionVector) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dims(format!(
            "action shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sq: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sq / a.as_slice().len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dims(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::param("pearson needs at least two samples"));
    }
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero variance in {}",
            if sxx == 0.0 { "x" } else { "y" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise (cascade) summation; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| pairwise_sum(xs) / xs.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    Some((pairwise_sum(&dev) / xs.len() as f64).sqrt())
}

/// nmr@k averaged uniformly over a set of maps (the expectation over inputs).
pub fn mean_nmr(maps: &[(&ScalarField, &SemanticPartition)], k_percent: f64) -> Result<f64> {
    let vals = maps
        .iter()
        .map(|(m, p)| nmr(m, p, k_percent))
        .collect::<Result<Vec<_>>>()?;
    mean(&vals).ok_or_else(|| Error::param("no maps to average"))
}

/// Which importance scorer produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMethod {
    Iss,
    Att,
    Norm,
    Random,
}

impl SaliencyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SaliencyMethod::Iss => "iss",
            SaliencyMethod::Att => "att",
            SaliencyMethod::Norm => "norm",
            SaliencyMethod::Random => "random",
        }
    }
}

/// Per-map ratio summary shared by every saliency method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub method: SaliencyMethod,
    /// `(k, nmr@k)` pairs, count-based.
    pub nmr_at: Vec<(f64, f64)>,
    /// Mass-weighted shares.
    pub rho_act: f64,
    pub rho_sup: f64,
    pub rho_nuis: f64,
}

/// Evaluate the nmr@k list and the mass-weighted shares for one map. ISS and
/// the attention/norm baselines all go through here.
pub fn evaluate_map(
    method: SaliencyMethod,
    map: &ScalarField,
    partition: &SemanticPartition,
    k_list: &[f64],
) -> Result<MapMetrics> {
    let nmr_at = k_list
        .iter()
        .map(|&k| Ok((k, nmr(map, partition, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let [rho_act, rho_sup, rho_nuis] = mass_fractions(map, partition)?;
    Ok(MapMetrics {
        method,
        nmr_at,
        rho_act,
        rho_sup,
        rho_nuis,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub episode: String,
    pub view: String,
    pub t: usize,
    pub k: f64,
    pub nmr: f64,
    pub rho_act: f64,
    pub rho_sup: f64,
    pub rho_nuis: f64,
    pub delta_s: Option<f64>,
    pub delta_a: Option<f64>,
}

pub const METRICS_CSV_HEADER: [&str; 11] = [
    "run_id", "episode", "view", "t", "k", "nmr", "rho_act", "rho_sup", "rho_nuis", "delta_s", "delta_a",
];

/// Writes [`MetricsRecord`] rows under the fixed header.
pub struct MetricsCsvWriter<W: io::Write> {
    inner: csv::Writer<W>,
}

impl<W: io::Write> MetricsCsvWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        inner.write_record(METRICS_CSV_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: usize, h: usize, data: &[f32]) -> ScalarField {
        ScalarField::new(w, h, data.to_vec()).unwrap()
    }

    fn thirds(w: usize) -> SemanticPartition {
        let labels = (0..w * 3)
            .map(|i| Label::ALL[i / w])
            .collect();
        SemanticPartition::new(w, 3, labels).unwrap()
    }

    #[test]
    fn single_pixel_is_its_own_critical_set() {
        let mut data = vec![0.0; 16];
        data[5] = 3.0;
        let m = field(4, 4, &data);
        for k in [1.0, 10.0, 50.0, 100.0] {
            assert_eq!(critical_set(&m, k).unwrap().indices, vec![5]);
        }
    }

    #[test]
    fn uniform_map_breaks_ties_by_index() {
        let m = ScalarField::constant(10, 10, 1.0).unwrap();
        let set = critical_set(&m, 10.0).unwrap();
        assert_eq!(set.indices, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cumulative_prefix_example() {
        let m = field(4, 1, &[4.0, 3.0, 2.0, 1.0]);
        let set = critical_set(&m, 50.0).unwrap();
        assert_eq!(set.indices, vec![0, 1]);
        assert_eq!(set.mass_covered, 7.0);
    }

    #[test]
    fn degenerate_and_invalid_maps() {
        let zero = ScalarField::zeros(3, 3).unwrap();
        assert!(matches!(critical_set(&zero, 10.0), Err(Error::Degenerate(_))));
        let m = field(2, 1, &[1.0, 1.0]);
        assert!(critical_set(&m, 0.0).is_err());
        assert!(critical_set(&m, 100.5).is_err());
        assert!(critical_set(&field(2, 1, &[1.0, -1.0]), 10.0).is_err());
    }

    #[test]
    fn ratios_inside_outside_and_uniform() {
        let p = thirds(4);
        let mut data = vec![0.0; 12];
        data[0] = 1.0; // ACT row
        let m = field(4, 3, &data);
        assert_eq!(regional_mass_ratio(&m, &p, Label::Act, 10.0).unwrap(), 1.0);
        assert_eq!(regional_mass_ratio(&m, &p, Label::Nuis, 10.0).unwrap(), 0.0);

        let u = ScalarField::constant(4, 3, 2.0).unwrap();
        for l in Label::ALL {
            assert!((regional_mass_ratio(&u, &p, l, 100.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
            assert!((mass_fraction(&u, &p, l).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nmr_on_region_supported_maps() {
        let p = thirds(5);
        let nuis_only: Vec<f32> = p
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &l)| if l == Label::Nuis { 1.0 + i as f32 } else { 0.0 })
            .collect();
        let causal_only: Vec<f32> = p
            .labels()
            .iter()
            .map(|&l| if l == Label::Nuis { 0.0 } else { 0.5 })
            .collect();
        for k in [1.0, 5.0, 10.0, 15.0, 20.0] {
            assert_eq!(nmr(&field(5, 3, &nuis_only), &p, k).unwrap(), 1.0);
            assert_eq!(nmr(&field(5, 3, &causal_only), &p, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn count_and_mass_ratios_differ_on_nonuniform_maps() {
        let p = SemanticPartition::new(2, 1, vec![Label::Act, Label::Nuis]).unwrap();
        let m = field(2, 1, &[3.0, 1.0]);
        assert_eq!(nmr(&m, &p, 100.0).unwrap(), 0.5);
        assert_eq!(nuisance_mass_fraction(&m, &p).unwrap(), 0.25);
    }

    #[test]
    fn cosine_examples() {
        let a = field(2, 1, &[1.0, 0.0]);
        let b = field(2, 1, &[1.0, 1.0]);
        let c = field(2, 1, &[0.0, 2.0]);
        assert_eq!(cosine_similarity(&b, &b).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &c).unwrap(), 0.0);
        assert!((cosine_similarity(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&a, &ScalarField::zeros(2, 1).unwrap()).is_err());
    }

    #[test]
    fn action_mse_examples() {
        let z = ActionVector::single(vec![0.0, 0.0]).unwrap();
        let o = ActionVector::single(vec![1.0, 1.0]).unwrap();
        assert_eq!(action_mse(&z, &z).unwrap(), 0.0);
        assert_eq!(action_mse(&z, &o).unwrap(), 1.0);
        assert!(action_mse(&z, &ActionVector::single(vec![0.0]).unwrap()).is_err());
    }

    /// z-score route, independent of the covariance route in `pearson`.
    fn pearson_zscore(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let sd = |v: &[f64], m: f64| (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let (mx, my) = (mean(x), mean(y));
        let (sx, sy) = (sd(x, mx), sd(y, my));
        x.iter()
            .zip(y)
            .map(|(a, b)| ((a - mx) / sx) * ((b - my) / sy))
            .sum::<f64>()
            / (n - 1.0)
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);

        let (x, y) = ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]);
        // By hand: means 2 and 7/3; Sxy = 3, Sxx = 2, Syy = 14/3.
        let hand = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        let r = pearson(&x, &y).unwrap();
        assert!((r - hand).abs() < 1e-12);
        assert!((r - pearson_zscore(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn csv_header_is_fixed() {
        let mut w = MetricsCsvWriter::new(Vec::new()).unwrap();
        w.write(&MetricsRecord {
            run_id: "r".into(),
            episode: "ep0".into(),
            view: "front".into(),
            t: 1,
            k: 10.0,
            nmr: 0.5,
            rho_act: 0.25,
            rho_sup: 0.25,
            rho_nuis: 0.5,
            delta_s: None,
            delta_a: Some(0.0),
        })
        .unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,episode,view,t,k,nmr,rho_act,rho_sup,rho_nuis,delta_s,delta_a"
        );
        assert_eq!(lines.next().unwrap(), "r,ep0,front,1,10.0,0.5,0.25,0.25,0.5,,0.0");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn map_and_partition() -> impl Strategy<Value = (ScalarField, SemanticPartition)> {
            (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
                (
                    proptest::collection::vec(0.0f32..10.0, w * h),
                    proptest::collection::vec(0u8..3, w * h),
                )
                    .prop_filter_map("nonzero map", move |(v, l)| {
                        if v.iter().all(|&x| x == 0.0) {
                            return None;
                        }
                        let labels = l.iter().map(|&c| Label::ALL[c as usize]).collect();
                        Some((
                            ScalarField::new(w, h, v).unwrap(),
                            SemanticPartition::new(w, h, labels).unwrap(),
                        ))
                    })
            })
        }

        proptest! {
            #[test]
            fn critical_sets_nest((m, _) in map_and_partition()) {
                let ks = [1.0, 5.0, 10.0, 15.0, 20.0, 50.0, 100.0];
                for pair in ks.windows(2) {
                    let a = critical_set(&m, pair[0]).unwrap();
                    let b = critical_set(&m, pair[1]).unwrap();
                    prop_assert!(a.indices.iter().all(|i| b.contains(*i)));
                }
            }

            #[test]
            fn critical_set_is_minimal((m, _) in map_and_partition(), k in 0.5f64..100.0) {
                let set = critical_set(&m, k).unwrap();
                let threshold = k / 100.0 * set.total_mass;
                prop_assert!(set.mass_covered >= threshold);
                let last = *set.indices.last().unwrap();
                prop_assert!(set.mass_covered - (m.data()[last] as f64) < threshold);
            }

            #[test]
            fn ratios_in_unit_interval((m, p) in map_and_partition(), k in 0.5f64..100.0) {
                let r = regional_mass_ratios(&m, &p, k).unwrap();
                prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let f = mass_fractions(&m, &p).unwrap();
                prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn pearson_affine_invariance(
                xs in proptest::collection::vec(-100.0f64..100.0, 3..30),
                noise in proptest::collection::vec(-100.0f64..100.0, 30),
                a in 0.01f64..100.0, b in -100.0f64..100.0
            ) {
                let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
                if let Ok(r) = pearson(&xs, &ys) {
                    let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                    let r2 = pearson(&xs2, &ys).unwrap();
                    prop_assert!((r - r2).abs() < 1e-12);
                }
            }
        }
    }
}
