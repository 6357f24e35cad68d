//! Overlap, surface-distance and detection metrics per structure, plus
//! whole-heart (union) rows and CSV/JSON reports.
//!
//! Distances are in voxel units. Metrics that are undefined for a case
//! (an empty mask, a zero denominator) are `None`, written as `NA` in CSV
//! and `null` in JSON, and skipped by aggregation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::squared_edt;
use crate::volume_io::{Dims, LabelVolume};

/// Name of the union-of-structures row.
pub const WHOLE_HEART: &str = "WH";

fn check_len(x: &[bool], y: &[bool]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mask sizes differ: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn counts(pred: &[bool], gt: &[bool]) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, fn_: 0 };
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// `2|X ∩ Y| / (|X| + |Y|)`, 1 when both are empty.
pub fn dsc(x: &[bool], y: &[bool]) -> Result<f64> {
    check_len(x, y)?;
    let c = counts(x, y);
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `|X ∩ Y| / |X ∪ Y|`, 1 when both are empty.
pub fn jaccard(x: &[bool], y: &[bool]) -> Result<f64> {
    check_len(x, y)?;
    let c = counts(x, y);
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

/// `(TP / (TP + FN), TP / (TP + FP))`; `None` on a zero denominator.
pub fn sensitivity_precision(pred: &[bool], gt: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    check_len(pred, gt)?;
    let c = counts(pred, gt);
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((ratio(c.tp, c.tp + c.fn_), ratio(c.tp, c.tp + c.fp)))
}

/// Foreground voxels with at least one background 6-neighbour; outside the
/// volume counts as background.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    pub dims: Dims,
    /// `(z, y, x)` in raster order.
    pub points: Vec<[usize; 3]>,
    pub spacing: [f64; 3],
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    fn indicator(&self) -> Vec<bool> {
        let mut m = vec![false; self.dims.len()];
        for &[z, y, x] in &self.points {
            m[self.dims.index(z, y, x)] = true;
        }
        m
    }

    /// Distance from each of `self`'s points to the nearest point of `other`.
    pub fn distances_to(&self, other: &SurfaceSet) -> Vec<f64> {
        assert_eq!(self.dims, other.dims, "surfaces from different grids");
        if other.is_empty() {
            return vec![f64::INFINITY; self.len()];
        }
        let field = squared_edt(&other.indicator(), other.dims, self.spacing, false);
        self.points
            .iter()
            .map(|&[z, y, x]| field[self.dims.index(z, y, x)].sqrt())
            .collect()
    }
}

pub fn extract_surface(mask: &[bool], dims: Dims) -> SurfaceSet {
    assert_eq!(mask.len(), dims.len());
    let ext = dims.as_array();
    let mut points = Vec::new();
    for i in 0..dims.len() {
        if !mask[i] {
            continue;
        }
        let p = dims.coords(i);
        let on_surface = (0..3).any(|a| {
            let mut lo = p;
            let mut hi = p;
            if p[a] == 0 || p[a] + 1 == ext[a] {
                return true;
            }
            lo[a] -= 1;
            hi[a] += 1;
            !mask[dims.index(lo[0], lo[1], lo[2])] || !mask[dims.index(hi[0], hi[1], hi[2])]
        });
        if on_surface {
            points.push(p);
        }
    }
    SurfaceSet {
        dims,
        points,
        spacing: [1.0; 3],
    }
}

/// Linear interpolation between order statistics at fraction `q` of `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn surfaces(x: &[bool], y: &[bool], dims: Dims) -> Result<Option<(SurfaceSet, SurfaceSet)>> {
    check_len(x, y)?;
    if x.len() != dims.len() {
        return Err(Error::Shape(format!("mask of {} voxels does not fit {dims}", x.len())));
    }
    let (sx, sy) = (extract_surface(x, dims), extract_surface(y, dims));
    Ok((!sx.is_empty() && !sy.is_empty()).then_some((sx, sy)))
}

/// Larger of the two directed 95th-percentile surface distances; `None`
/// when either mask is empty.
pub fn hd95(x: &[bool], y: &[bool], dims: Dims) -> Result<Option<f64>> {
    let Some((sx, sy)) = surfaces(x, y, dims)? else {
        return Ok(None);
    };
    let directed = |a: &SurfaceSet, b: &SurfaceSet| {
        let mut d = a.distances_to(b);
        d.sort_by(f64::total_cmp);
        percentile(&d, 0.95)
    };
    Ok(Some(directed(&sx, &sy).max(directed(&sy, &sx))))
}

/// Average symmetric surface distance; `None` when either mask is empty.
pub fn assd(x: &[bool], y: &[bool], dims: Dims) -> Result<Option<f64>> {
    let Some((sx, sy)) = surfaces(x, y, dims)? else {
        return Ok(None);
    };
    let total: f64 = sx.distances_to(&sy).iter().sum::<f64>() + sy.distances_to(&sx).iter().sum::<f64>();
    Ok(Some(total / (sx.len() + sy.len()) as f64))
}

/// One `(case, structure)` row of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case_id: String,
    pub structure: String,
    pub dsc: f64,
    pub ji: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["dsc", "ji", "hd95", "assd", "sensitivity", "precision"];

impl MetricsRow {
    pub fn compute(case_id: &str, structure: &str, pred: &[bool], gt: &[bool], dims: Dims) -> Result<Self> {
        let (sensitivity, precision) = sensitivity_precision(pred, gt)?;
        Ok(Self {
            case_id: case_id.to_string(),
            structure: structure.to_string(),
            dsc: dsc(pred, gt)?,
            ji: jaccard(pred, gt)?,
            hd95: hd95(pred, gt, dims)?,
            assd: assd(pred, gt, dims)?,
            sensitivity,
            precision,
        })
    }

    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.dsc),
            Some(self.ji),
            self.hd95,
            self.assd,
            self.sensitivity,
            self.precision,
        ]
    }
}

/// Mean and spread of one metric over the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => undefined += 1,
            }
        }
        let n = defined.len();
        let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
        let std = mean.map(|m| (defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt());
        Self {
            mean,
            std,
            defined: n,
            undefined,
        }
    }
}

/// Per-structure aggregate across cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub structure: String,
    pub dsc: Aggregate,
    pub ji: Aggregate,
    pub hd95: Aggregate,
    pub assd: Aggregate,
    pub sensitivity: Aggregate,
    pub precision: Aggregate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

impl MetricsReport {
    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    /// Structure names in first-seen order.
    pub fn structures(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.structure) {
                names.push(r.structure.clone());
            }
        }
        names
    }

    pub fn rows_for<'a>(&'a self, structure: &'a str) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| r.structure == structure)
    }

    pub fn summarize(&self) -> Vec<SummaryRow> {
        self.structures()
            .into_iter()
            .map(|s| {
                let rows: Vec<&MetricsRow> = self.rows_for(&s).collect();
                let agg = |k: usize| Aggregate::of(rows.iter().map(|r| r.values()[k]));
                SummaryRow {
                    dsc: agg(0),
                    ji: agg(1),
                    hd95: agg(2),
                    assd: agg(3),
                    sensitivity: agg(4),
                    precision: agg(5),
                    structure: s,
                }
            })
            .collect()
    }

    /// Mean whole-heart DSC over cases, if any.
    pub fn mean_wh_dsc(&self) -> Option<f64> {
        Aggregate::of(self.rows_for(WHOLE_HEART).map(|r| Some(r.dsc))).mean
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["case_id", "structure"];
        header.extend(METRIC_NAMES);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.case_id.clone(), r.structure.clone()];
            rec.extend(r.values().into_iter().map(fmt_opt));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv_string()?.as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(&self.rows)?.as_bytes())
    }

    /// One row per structure: `<metric>_mean`, `<metric>_std`, `<metric>_na`.
    pub fn summary_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["structure".to_string(), "cases".to_string()];
        for m in METRIC_NAMES {
            header.extend([format!("{m}_mean"), format!("{m}_std"), format!("{m}_na")]);
        }
        w.write_record(&header)?;
        for s in self.summarize() {
            let aggs = [s.dsc, s.ji, s.hd95, s.assd, s.sensitivity, s.precision];
            let mut rec = vec![s.structure.clone(), (s.dsc.defined + s.dsc.undefined).to_string()];
            for a in aggs {
                rec.extend([fmt_opt(a.mean), fmt_opt(a.std), a.undefined.to_string()]);
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// `<stem>.csv`, `<stem>.json`, `<stem>_summary.csv` and `<stem>_summary.json` in `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        self.write_json(&dir.join(format!("{stem}.json")))?;
        write_file(&dir.join(format!("{stem}_summary.csv")), self.summary_csv_string()?.as_bytes())?;
        write_file(
            &dir.join(format!("{stem}_summary.json")),
            serde_json::to_string_pretty(&self.summarize())?.as_bytes(),
        )
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<Option<f64>> {
                match &rec[i] {
                    "NA" => Ok(None),
                    s => s.parse().map(Some).map_err(|e| Error::Serde(format!("bad metric `{s}`: {e}"))),
                }
            };
            let need = |i: usize| num(i)?.ok_or_else(|| Error::Serde("overlap metrics cannot be NA".into()));
            rows.push(MetricsRow {
                case_id: rec[0].to_string(),
                structure: rec[1].to_string(),
                dsc: need(2)?,
                ji: need(3)?,
                hd95: num(4)?,
                assd: num(5)?,
                sensitivity: num(6)?,
                precision: num(7)?,
            });
        }
        Ok(Self { rows })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Per-structure rows followed by the whole-heart row.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("prediction {} vs ground truth {}", pred.dims, gt.dims)));
    }
    if pred.label_map != gt.label_map {
        return Err(Error::InvalidArgument("prediction and ground truth use different label maps".into()));
    }
    let dims = gt.dims;
    let (pc, gc) = (pred.class_indices(), gt.class_indices());
    let mut rows = Vec::with_capacity(gt.n_structures() + 1);
    for class in 1..=gt.n_structures() {
        let p: Vec<bool> = pc.iter().map(|&c| c == class).collect();
        let g: Vec<bool> = gc.iter().map(|&c| c == class).collect();
        let name = gt.label_map.name_of_class(class);
        rows.push(MetricsRow::compute(case_id, name, &p, &g, dims)?);
    }
    let p: Vec<bool> = pc.iter().map(|&c| c != 0).collect();
    let g: Vec<bool> = gc.iter().map(|&c| c != 0).collect();
    rows.push(MetricsRow::compute(case_id, WHOLE_HEART, &p, &g, dims)?);
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::generate_phantom;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(dims: Dims, p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
        (0..dims.len()).map(|_| rng.gen_bool(p)).collect()
    }

    /// Surface voxels by explicit neighbour enumeration.
    fn surface_brute(mask: &[bool], dims: Dims) -> Vec<[usize; 3]> {
        let ext = dims.as_array().map(|v| v as i64);
        let mut out = Vec::new();
        for i in 0..dims.len() {
            if !mask[i] {
                continue;
            }
            let p = dims.coords(i).map(|v| v as i64);
            let offs = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
            let bg = offs.iter().any(|o| {
                let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                (0..3).any(|a| q[a] < 0 || q[a] >= ext[a]) || !mask[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)]
            });
            if bg {
                out.push(dims.coords(i));
            }
        }
        out
    }

    fn directed_brute(a: &[[usize; 3]], b: &[[usize; 3]]) -> Vec<f64> {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// Nearest-rank-free percentile by explicit interpolation formula.
    fn p95_brute(mut d: Vec<f64>) -> f64 {
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = (d.len() as f64 - 1.0) * 0.95;
        let lo = h.floor();
        let frac = h - lo;
        let lo = lo as usize;
        if lo + 1 < d.len() {
            d[lo] * (1.0 - frac) + d[lo + 1] * frac
        } else {
            d[lo]
        }
    }

    #[test]
    fn overlap_examples() {
        let x = [true, true, false, false];
        let y = [false, true, true, false];
        assert_eq!(dsc(&x, &x).unwrap(), 1.0);
        assert_eq!(dsc(&x, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dsc(&x, &y).unwrap(), 0.5);
        assert_eq!(jaccard(&x, &y).unwrap(), 1.0 / 3.0);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(jaccard(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dsc(&x, &[true]).is_err());
    }

    #[test]
    fn jaccard_dsc_identity_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = Dims::cube(6);
        for _ in 0..100 {
            let a = random_mask(dims, rng.gen_range(0.05..0.9), &mut rng);
            let b = random_mask(dims, rng.gen_range(0.05..0.9), &mut rng);
            let (d, j) = (dsc(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
            assert!(0.0 <= j && j <= d && d <= 1.0);
        }
    }

    #[test]
    fn sensitivity_precision_examples() {
        let gt = [true, true, true, true, true, false, false];
        let pred = [true, true, true, false, false, true, false];
        let (s, p) = sensitivity_precision(&pred, &gt).unwrap();
        assert!((s.unwrap() - 0.6).abs() < 1e-15);
        assert!((p.unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(sensitivity_precision(&gt, &gt).unwrap(), (Some(1.0), Some(1.0)));
        let sup = [true; 7];
        let (s, p) = sensitivity_precision(&sup, &gt).unwrap();
        assert_eq!(s, Some(1.0));
        assert!(p.unwrap() < 1.0);
        assert_eq!(sensitivity_precision(&[false; 7], &[false; 7]).unwrap(), (None, None));
    }

    #[test]
    fn surface_examples() {
        let dims = Dims::cube(6);
        let mut m = vec![false; dims.len()];
        m[dims.index(2, 3, 1)] = true;
        assert_eq!(extract_surface(&m, dims).points, vec![[2, 3, 1]]);

        let cube: Vec<bool> = (0..dims.len()).map(|i| dims.coords(i).iter().all(|&c| (1..5).contains(&c))).collect();
        let s = extract_surface(&cube, dims);
        assert_eq!(s.len(), 56);
        for p in &s.points {
            assert!(p.iter().any(|&c| c == 1 || c == 4));
        }
        assert!(extract_surface(&vec![false; dims.len()], dims).is_empty());
        // whole volume: only the border is surface
        let full = extract_surface(&vec![true; 64], Dims::cube(4));
        assert_eq!(full.len(), 56);
    }

    fn plates(offset: usize) -> (Vec<bool>, Vec<bool>, Dims) {
        let dims = Dims::cube(8);
        let plate = |z0: usize| (0..dims.len()).map(|i| dims.coords(i)[0] == z0).collect::<Vec<_>>();
        (plate(3), plate(3 + offset), dims)
    }

    #[test]
    fn plate_offsets() {
        let (x, y, dims) = plates(1);
        assert_eq!(hd95(&x, &y, dims).unwrap(), Some(1.0));
        assert_eq!(assd(&x, &y, dims).unwrap(), Some(1.0));
        let (x, y, dims) = plates(3);
        assert_eq!(hd95(&x, &y, dims).unwrap(), Some(3.0));
        assert_eq!(hd95(&x, &x, dims).unwrap(), Some(0.0));
        assert_eq!(assd(&x, &x, dims).unwrap(), Some(0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..21).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert!((percentile(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[4.0], 0.95), 4.0);
    }

    #[test]
    fn empty_masks_give_undefined_surface_metrics() {
        let dims = Dims::cube(4);
        let e = vec![false; 64];
        let mut f = e.clone();
        f[5] = true;
        assert_eq!(hd95(&e, &f, dims).unwrap(), None);
        assert_eq!(assd(&f, &e, dims).unwrap(), None);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let (_, gt) = generate_phantom(0, Dims::cube(16), 3).unwrap();
        let rep = evaluate_case("c0", &gt, &gt).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.rows[3].structure, WHOLE_HEART);
        for r in &rep.rows {
            assert_eq!(r.values(), [Some(1.0), Some(1.0), Some(0.0), Some(0.0), Some(1.0), Some(1.0)]);
        }
        let empty = LabelVolume::background(gt.dims, gt.label_map.clone());
        let rep = evaluate_case("c0", &empty, &gt).unwrap();
        for r in &rep.rows {
            assert_eq!(r.dsc, 0.0);
            assert_eq!(r.hd95, None);
            assert_eq!(r.assd, None);
            assert_eq!(r.precision, None);
            assert_eq!(r.sensitivity, Some(0.0));
        }
    }

    #[test]
    fn misaligned_volumes_are_rejected() {
        let (_, a) = generate_phantom(0, Dims::cube(16), 3).unwrap();
        let (_, b) = generate_phantom(0, Dims::new(16, 16, 20), 3).unwrap();
        assert!(matches!(evaluate_case("x", &a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn csv_and_json_reports() {
        let (_, gt) = generate_phantom(1, Dims::cube(16), 2).unwrap();
        let empty = LabelVolume::background(gt.dims, gt.label_map.clone());
        let mut rep = evaluate_case("a", &gt, &gt).unwrap();
        rep.extend(evaluate_case("b", &empty, &gt).unwrap());
        let csv = rep.to_csv_string().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "case_id,structure,dsc,ji,hd95,assd,sensitivity,precision");
        assert!(csv.contains("b,WH,0,0,NA,NA,0,NA"), "{csv}");

        let dir = tempfile::tempdir().unwrap();
        rep.write_csv(&dir.path().join("m.csv")).unwrap();
        assert_eq!(MetricsReport::read_csv(&dir.path().join("m.csv")).unwrap(), rep);
        rep.write_json(&dir.path().join("m.json")).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert!(json[5]["hd95"].is_null());

        let summary = rep.summarize();
        let wh = summary.iter().find(|s| s.structure == WHOLE_HEART).unwrap();
        assert_eq!(wh.dsc.mean, Some(0.5));
        assert_eq!(wh.hd95.mean, Some(0.0));
        assert_eq!((wh.hd95.defined, wh.hd95.undefined), (1, 1));
        assert_eq!(rep.mean_wh_dsc(), Some(0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn surface_matches_enumeration(seed in any::<u64>(), p in 0.1f64..0.95) {
            let dims = Dims::new(5, 6, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(dims, p, &mut rng);
            prop_assert_eq!(extract_surface(&m, dims).points, surface_brute(&m, dims));
        }

        #[test]
        fn surface_metrics_match_all_pairs(seed in any::<u64>(), p in 0.05f64..0.9, q in 0.05f64..0.9) {
            let dims = Dims::cube(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_mask(dims, p, &mut rng);
            let y = random_mask(dims, q, &mut rng);
            let (sx, sy) = (surface_brute(&x, dims), surface_brute(&y, dims));
            prop_assume!(!sx.is_empty() && !sy.is_empty());
            let (dxy, dyx) = (directed_brute(&sx, &sy), directed_brute(&sy, &sx));
            let h = p95_brute(dxy.clone()).max(p95_brute(dyx.clone()));
            let a = (dxy.iter().sum::<f64>() + dyx.iter().sum::<f64>()) / (sx.len() + sy.len()) as f64;
            prop_assert!((hd95(&x, &y, dims).unwrap().unwrap() - h).abs() < 1e-6);
            prop_assert!((assd(&x, &y, dims).unwrap().unwrap() - a).abs() < 1e-6);
        }

        #[test]
        fn symmetric_metrics(seed in any::<u64>()) {
            let dims = Dims::cube(7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_mask(dims, 0.4, &mut rng);
            let y = random_mask(dims, 0.3, &mut rng);
            prop_assert_eq!(hd95(&x, &y, dims).unwrap(), hd95(&y, &x, dims).unwrap());
            prop_assert_eq!(assd(&x, &y, dims).unwrap(), assd(&y, &x, dims).unwrap());
            let (s, _) = sensitivity_precision(&x, &y).unwrap();
            let (_, p) = sensitivity_precision(&y, &x).unwrap();
            prop_assert_eq!(s, p);
            let (d, j) = (dsc(&x, &y).unwrap(), jaccard(&x, &y).unwrap());
            prop_assert!(0.0 <= j && j <= d && d <= 1.0);
        }

        #[test]
        fn zero_iff_identical_surfaces(seed in any::<u64>()) {
            let dims = Dims::cube(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_mask(dims, 0.5, &mut rng);
            let mut y = x.clone();
            let flip = rng.gen_range(0..dims.len());
            y[flip] = !y[flip];
            prop_assume!(x.iter().any(|&b| b) && y.iter().any(|&b| b));
            prop_assert_eq!(assd(&x, &x, dims).unwrap(), Some(0.0));
            let same = extract_surface(&x, dims).points == extract_surface(&y, dims).points;
            prop_assert_eq!(assd(&x, &y, dims).unwrap() == Some(0.0), same);
        }
    }
}
