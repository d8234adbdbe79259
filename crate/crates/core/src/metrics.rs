//! Per-zone evaluation: Dice, HD95, IoU, volumetric similarity,
//! sensitivity and precision, averaged over zones 1-3.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, VoxelGrid, Zone, ZoneGrid};
use crate::labelgen::squared_edt;
use crate::par;

/// One-vs-rest counts for a single zone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn actual(&self) -> u64 {
        self.tp + self.fn_
    }
}

fn check_dims(pred: &ZoneGrid, truth: &ZoneGrid) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "metrics",
            format!("prediction {} vs ground truth {}", pred.dims(), truth.dims()),
        ));
    }
    Ok(())
}

pub fn zone_confusion(pred: &ZoneGrid, truth: &ZoneGrid, zone: u8) -> Result<ConfusionCounts> {
    check_dims(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == zone, t == zone) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Overlap ratios; `None` marks an undefined ratio (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub vs: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Both-empty masks score DSC = IoU = VS = 1.
pub fn overlap_metrics(c: &ConfusionCounts, vol_pred: u64, vol_truth: u64) -> OverlapMetrics {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let both_empty = vol_pred == 0 && vol_truth == 0;
    let (vp, vt) = (vol_pred as f64, vol_truth as f64);
    OverlapMetrics {
        dsc: if both_empty { Some(1.0) } else { ratio(2.0 * tp, 2.0 * tp + fp + fn_) },
        iou: if both_empty { Some(1.0) } else { ratio(tp, tp + fp + fn_) },
        vs: if both_empty { Some(1.0) } else { ratio(vp + vt - (vp - vt).abs(), vp + vt) },
        sensitivity: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
    }
}

/// Mask voxels with a 6-neighbor outside the mask or outside the volume.
pub fn extract_surface(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let d = mask.data();
    let data = (0..dims.len())
        .map(|i| {
            d[i] && {
                let c = dims.coords(i);
                (0..3).any(|axis| {
                    [false, true].into_iter().any(|fwd| match dims.step(c, axis, fwd) {
                        None => true,
                        Some(n) => !d[dims.index(n[0], n[1], n[2])],
                    })
                })
            }
        })
        .collect();
    VoxelGrid::new(dims, mask.spacing(), data).expect("same geometry")
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Nearest-surface distances (mm) from each surface voxel of `from` to the
/// surface of `to`, in voxel order.
pub fn directed_surface_distances(from: &Mask, to: &Mask) -> Vec<f64> {
    let dist = squared_edt(to);
    from.data()
        .iter()
        .zip(dist.data())
        .filter(|(&on, _)| on)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// 95th percentile of the pooled bidirectional surface distances.
/// `Some(0.0)` when both masks are empty, `None` when exactly one is.
pub fn hd95(pred: &Mask, truth: &Mask) -> Result<Option<f64>> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("hd95", format!("{} vs {}", pred.dims(), truth.dims())));
    }
    let sp = extract_surface(pred);
    let sg = extract_surface(truth);
    match (sp.count_true(), sg.count_true()) {
        (0, 0) => return Ok(Some(0.0)),
        (0, _) | (_, 0) => return Ok(None),
        _ => {}
    }
    // distances are measured on truth's spacing
    let sp = sp.with_spacing(truth.spacing());
    let mut pool = directed_surface_distances(&sp, &sg);
    pool.extend(directed_surface_distances(&sg, &sp));
    pool.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&pool, 95.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub zone: u8,
    pub dsc: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub iou: Option<f64>,
    pub vs: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub iou: Option<f64>,
    pub vs: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub zones: Vec<ZoneMetrics>,
    pub mean: MeanMetrics,
    /// `zone<k>.<metric>` for every undefined entry.
    pub undefined: Vec<String>,
}

pub const METRIC_NAMES: [&str; 6] = ["dsc", "hd95_mm", "iou", "vs", "sensitivity", "precision"];

impl ZoneMetrics {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.dsc, self.hd95_mm, self.iou, self.vs, self.sensitivity, self.precision]
    }
}

impl MeanMetrics {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.dsc, self.hd95_mm, self.iou, self.vs, self.sensitivity, self.precision]
    }
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = vals.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn zone_metrics(pred: &ZoneGrid, truth: &ZoneGrid, zone: u8) -> Result<ZoneMetrics> {
    let counts = zone_confusion(pred, truth, zone)?;
    let o = overlap_metrics(&counts, counts.predicted(), counts.actual());
    let pm = pred.map(|&v| v == zone).with_spacing(truth.spacing());
    let tm = truth.map(|&v| v == zone);
    Ok(ZoneMetrics {
        zone,
        dsc: o.dsc,
        hd95_mm: hd95(&pm, &tm)?,
        iou: o.iou,
        vs: o.vs,
        sensitivity: o.sensitivity,
        precision: o.precision,
        counts,
    })
}

/// Metrics for zones 1-3 and their unweighted means over defined entries.
/// Distances use the ground-truth spacing.
pub fn evaluate_zones(pred: &ZoneGrid, truth: &ZoneGrid) -> Result<MetricsReport> {
    check_dims(pred, truth)?;
    let zones = par::try_map_range(Zone::SCORED.len(), |i| zone_metrics(pred, truth, Zone::SCORED[i] as u8))?;
    let col = |k: usize| mean_defined(zones.iter().map(|z| z.values()[k]));
    let mean = MeanMetrics {
        dsc: col(0),
        hd95_mm: col(1),
        iou: col(2),
        vs: col(3),
        sensitivity: col(4),
        precision: col(5),
    };
    let mut undefined = Vec::new();
    for z in &zones {
        for (name, v) in METRIC_NAMES.iter().zip(z.values()) {
            if v.is_none() {
                undefined.push(format!("zone{}.{name}", z.zone));
            }
        }
    }
    Ok(MetricsReport { zones, mean, undefined })
}

pub const CSV_HEADER: &str = "dice_mean,dice_z1,dice_z2,dice_z3,hd95_mm,iou,vs,sensitivity,precision";

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// One CSV row in summary-table column order: Dice mean, Dice per zone,
    /// then mean HD95, IoU, VS, sensitivity and precision.
    pub fn csv_row(&self) -> String {
        let mut cells = vec![fmt(self.mean.dsc)];
        cells.extend(self.zones.iter().map(|z| fmt(z.dsc)));
        cells.extend([self.mean.hd95_mm, self.mean.iou, self.mean.vs, self.mean.sensitivity, self.mean.precision].map(fmt));
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn zone(&self, zone: u8) -> Option<&ZoneMetrics> {
        self.zones.iter().find(|z| z.zone == zone)
    }

    /// True when no metric is undefined.
    pub fn is_fully_defined(&self) -> bool {
        self.undefined.is_empty() && self.mean.values().iter().all(Option::is_some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, FlipSet, Spacing};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, f: impl FnMut(usize, usize, usize) -> u8) -> ZoneGrid {
        ZoneGrid::from_fn(Dims::cube(n), Spacing::default(), f)
    }

    /// All-pairs surface distances with an independent surface scan.
    fn oracle_hd95(a: &Mask, b: &Mask) -> Option<f64> {
        let surf = |m: &Mask| -> Vec<[usize; 3]> {
            let d = m.dims().to_array();
            let mut out = vec![];
            for z in 0..d[0] {
                for y in 0..d[1] {
                    for x in 0..d[2] {
                        if !m.get(z, y, x) {
                            continue;
                        }
                        let c = [z as isize, y as isize, x as isize];
                        let edge = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|o: &[isize; 3]| {
                            let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                            (0..3).any(|i| n[i] < 0 || n[i] >= d[i] as isize) || !m.get(n[0] as usize, n[1] as usize, n[2] as usize)
                        });
                        if edge {
                            out.push([z, y, x]);
                        }
                    }
                }
            }
            out
        };
        let (sa, sb) = (surf(a), surf(b));
        if sa.is_empty() && sb.is_empty() {
            return Some(0.0);
        }
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let s = b.spacing();
        let dist = |p: &[usize; 3], q: &[usize; 3]| {
            let dx = (p[2] as f64 - q[2] as f64) * s.x;
            let dy = (p[1] as f64 - q[1] as f64) * s.y;
            let dz = (p[0] as f64 - q[0] as f64) * s.z;
            ((dx * dx + dy * dy) + dz * dz).sqrt()
        };
        let mut pool: Vec<f64> = sa.iter().map(|p| sb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect();
        pool.extend(sb.iter().map(|p| sa.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)));
        pool.sort_by(f64::total_cmp);
        let pos = 0.95 * (pool.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = if lo + 1 < pool.len() { lo + 1 } else { lo };
        Some(pool[lo] * (1.0 - (pos - lo as f64)) + pool[hi] * (pos - lo as f64))
    }

    #[test]
    fn confusion_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = grid(8, |_, _, _| rng.gen_range(0..4));
        let c = zone_confusion(&t, &t, 2).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let bin = grid(4, |z, _, _| (z % 2) as u8 + 1);
        let comp = bin.map(|&v| 3 - v);
        let c = zone_confusion(&comp, &bin, 1).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 64);
        assert!(zone_confusion(&t, &grid(4, |_, _, _| 0), 1).is_err());
    }

    #[test]
    fn overlap_examples() {
        let same = overlap_metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 3 }, 5, 5);
        for v in [same.dsc, same.iou, same.vs, same.sensitivity, same.precision] {
            assert_eq!(v, Some(1.0));
        }
        let disjoint = overlap_metrics(&ConfusionCounts { tp: 0, fp: 4, fn_: 4, tn: 0 }, 4, 4);
        assert_eq!((disjoint.dsc, disjoint.iou, disjoint.vs), (Some(0.0), Some(0.0), Some(1.0)));
        let m = overlap_metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 }, 3, 3);
        assert!((m.dsc.unwrap() - 0.666667).abs() < 1e-6);
        assert_eq!(m.iou, Some(0.5));
        let empty = overlap_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 }, 0, 0);
        assert_eq!((empty.dsc, empty.iou, empty.vs), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!((empty.sensitivity, empty.precision), (None, None));
    }

    #[test]
    fn surface_examples() {
        let mut one = Mask::filled(Dims::cube(3), Spacing::default(), false);
        one.set(1, 1, 1, true);
        assert_eq!(extract_surface(&one), one);
        let cube = Mask::from_fn(Dims::cube(5), Spacing::default(), |z, y, x| (1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x));
        let s = extract_surface(&cube);
        assert_eq!(s.count_true(), 26);
        assert!(!s.get(2, 2, 2));
        let full = Mask::filled(Dims::cube(4), Spacing::default(), true);
        assert_eq!(extract_surface(&full).count_true(), 64 - 8);
    }

    #[test]
    fn hd95_examples() {
        let dims = Dims::new(1, 1, 8);
        let a = Mask::from_fn(dims, Spacing::default(), |_, _, x| x == 1);
        let b = Mask::from_fn(dims, Spacing::default(), |_, _, x| x == 6);
        assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        let e = Mask::filled(dims, Spacing::default(), false);
        assert_eq!(hd95(&e, &e).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &e).unwrap(), None);
    }

    #[test]
    fn hd95_matches_all_pairs_on_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10 {
            let n = 8 + i;
            let sp = if i % 2 == 0 { Spacing::default() } else { Spacing::new(2.0, 1.0, 0.5) };
            let blob = |rng: &mut ChaCha8Rng| {
                let c = [rng.gen_range(2.0..n as f64 - 2.0), rng.gen_range(2.0..n as f64 - 2.0), rng.gen_range(2.0..n as f64 - 2.0)];
                let r = rng.gen_range(1.5..4.0);
                Mask::from_fn(Dims::cube(n), sp, |z, y, x| {
                    let d = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                    d <= r * r
                })
            };
            let (a, b) = (blob(&mut rng), blob(&mut rng));
            let fast = hd95(&a, &b).unwrap().unwrap();
            assert!((fast - oracle_hd95(&a, &b).unwrap()).abs() < 1e-9);
            assert_eq!(hd95(&b, &a).unwrap(), Some(fast));
        }
    }

    #[test]
    fn report_schema_and_perfect_prediction() {
        let t = grid(8, |z, y, _| ((z + y) / 4) as u8);
        let r = evaluate_zones(&t, &t).unwrap();
        assert_eq!(r.zones.len(), 3);
        assert_eq!(r.zones.iter().map(|z| z.values().len()).sum::<usize>(), 18);
        assert_eq!(r.mean.values().len(), 6);
        assert_eq!(r.mean.dsc, Some(1.0));
        assert_eq!(r.mean.hd95_mm, Some(0.0));
        assert!(r.is_fully_defined());
        let csv = r.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 9);
    }

    #[test]
    fn undefined_entries_are_flagged_and_excluded() {
        let t = grid(4, |z, _, _| if z < 2 { 1 } else { 2 });
        let p = grid(4, |_, _, _| 1);
        let r = evaluate_zones(&p, &t).unwrap();
        assert!(r.undefined.contains(&"zone2.hd95_mm".to_string()));
        assert!(r.undefined.contains(&"zone2.precision".to_string()));
        // zone 3 is empty in both: overlap 1, hd95 0, ratios undefined
        let z3 = r.zone(3).unwrap();
        assert_eq!((z3.dsc, z3.hd95_mm), (Some(1.0), Some(0.0)));
        assert_eq!(r.mean.hd95_mm, mean_defined([r.zones[0].hd95_mm, r.zones[2].hd95_mm].into_iter()));
        assert!(r.to_csv().contains("NA") || r.mean.values().iter().all(Option::is_some));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn identities_and_flip_invariance(seed in 0u64..10_000, bits in 0u8..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = grid(8, |_, _, _| rng.gen_range(0..4));
            let p = grid(8, |_, _, _| rng.gen_range(0..4));
            let r = evaluate_zones(&p, &t).unwrap();
            for z in &r.zones {
                if let (Some(d), Some(i)) = (z.dsc, z.iou) {
                    prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
                }
                for v in [z.dsc, z.iou, z.vs, z.sensitivity, z.precision].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let f = FlipSet::from_bits(bits);
            let r2 = evaluate_zones(&p.flip_axes(f), &t.flip_axes(f)).unwrap();
            for (a, b) in r.zones.iter().zip(&r2.zones) {
                prop_assert_eq!(a.counts, b.counts);
                let (ha, hb) = (a.hd95_mm.unwrap(), b.hd95_mm.unwrap());
                prop_assert!((ha - hb).abs() < 1e-9);
            }
        }
    }
}
