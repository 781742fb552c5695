//! Segmentation metrics and per-image reports.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::file_stem;
use crate::error::{Error, Result};
use crate::imaging::{decode_scores, Mask};
use crate::retrieval::mean_std;
use crate::warning::Warning;

fn check_shapes<A, B>(pred: ArrayView2<'_, A>, gt: ArrayView2<'_, B>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

/// Pixel counts of a prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.pred + self.gt - self.intersection
    }
}

pub fn overlap(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    check_shapes(pred.view(), gt.view())?;
    let mut o = Overlap {
        intersection: 0,
        pred: 0,
        gt: 0,
    };
    for (&p, &g) in pred.iter().zip(gt) {
        o.pred += p as usize;
        o.gt += g as usize;
        o.intersection += (p && g) as usize;
    }
    Ok(o)
}

/// `(IoU, DSC)`; two empty masks score `(1, 1)`.
pub fn iou_dsc(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let o = overlap(pred, gt)?;
    if o.union() == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = o.intersection as f64 / o.union() as f64;
    let dsc = 2.0 * o.intersection as f64 / (o.pred + o.gt) as f64;
    Ok((iou, dsc))
}

/// Rank-based ROC AUC with tied scores sharing their average rank.
pub fn auc(scores: ArrayView2<'_, f64>, gt: &Mask) -> Result<f64> {
    check_shapes(scores, gt.view())?;
    let n_pos = gt.iter().filter(|&&g| g).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassGt);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(gt.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // Ranks i+1..=j averaged.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// Differences were all equal (or fewer than two pairs); `p_value` is 1.
    pub degenerate: bool,
}

/// Two-sided paired t-test.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let degenerate = TTest {
        t: 0.0,
        df: n.saturating_sub(1) as f64,
        p_value: 1.0,
        degenerate: true,
    };
    if n < 2 {
        return Ok(degenerate);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Ok(degenerate);
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRecord {
    pub id: String,
    pub iou: f64,
    pub dsc: f64,
    /// Missing when the ground truth has one class.
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Warning>,
}

/// Scores one prediction given as a score map; the binary mask is `score > 0.5`.
pub fn evaluate_scores(id: &str, scores: ArrayView2<'_, f64>, gt: &Mask) -> Result<SegRecord> {
    check_shapes(scores, gt.view())?;
    let pred = scores.mapv(|s| s > 0.5);
    let (iou, dsc) = iou_dsc(&pred, gt)?;
    let mut warnings = Vec::new();
    if !pred.iter().any(|&p| p) && !gt.iter().any(|&g| g) {
        warnings.push(Warning::BothMasksEmpty { id: id.to_string() });
    }
    let auc = match auc(scores, gt) {
        Ok(v) => {
            if scores.iter().all(|&s| s == 0.0 || s == 1.0) {
                warnings.push(Warning::BinaryScoreAuc { id: id.to_string() });
            }
            Some(v)
        }
        Err(Error::SingleClassGt) => None,
        Err(e) => return Err(e),
    };
    Ok(SegRecord {
        id: id.to_string(),
        iou,
        dsc,
        auc,
        warnings,
    })
}

pub fn evaluate_mask(id: &str, pred: &Mask, gt: &Mask) -> Result<SegRecord> {
    let scores = pred.mapv(|p| if p { 1.0 } else { 0.0 });
    evaluate_scores(id, scores.view(), gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Summary {
            mean,
            std,
            n: values.len(),
        })
    }

    /// `mean ± std` in percent with two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub method: String,
    pub modality: String,
    pub records: Vec<SegRecord>,
    pub iou: Option<Summary>,
    pub dsc: Option<Summary>,
    pub auc: Option<Summary>,
}

impl SegReport {
    pub fn new(method: &str, modality: &str, mut records: Vec<SegRecord>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let collect = |f: &dyn Fn(&SegRecord) -> Option<f64>| records.iter().filter_map(f).collect::<Vec<_>>();
        let iou = Summary::of(&collect(&|r| Some(r.iou)));
        let dsc = Summary::of(&collect(&|r| Some(r.dsc)));
        let auc = Summary::of(&collect(&|r| r.auc));
        Self {
            method: method.to_string(),
            modality: modality.to_string(),
            records,
            iou,
            dsc,
            auc,
        }
    }

    /// Paired t-test on a per-image metric against another report over the same ids.
    pub fn compare(&self, other: &SegReport, metric: fn(&SegRecord) -> f64) -> Result<TTest> {
        let ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        let other_ids: Vec<&str> = other.records.iter().map(|r| r.id.as_str()).collect();
        if ids != other_ids {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: other_ids.len(),
            });
        }
        let a: Vec<f64> = self.records.iter().map(metric).collect();
        let b: Vec<f64> = other.records.iter().map(metric).collect();
        paired_ttest(&a, &b)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Warning> {
        self.records.iter().flat_map(|r| &r.warnings)
    }
}

/// Summary table, one row per report: method,modality,IoU,DSC,AUC.
pub fn write_summary_csv<W: Write>(reports: &[SegReport], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    writer.write_record(["method", "modality", "IoU", "DSC", "AUC"]).map_err(to_io)?;
    let cell = |s: &Option<Summary>| s.map(|s| s.percent()).unwrap_or_else(|| "n/a".into());
    for r in reports {
        writer
            .write_record([
                r.method.clone(),
                r.modality.clone(),
                cell(&r.iou),
                cell(&r.dsc),
                cell(&r.auc),
            ])
            .map_err(to_io)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a prediction: an 8-bit PNG scaled to [0, 1] or a float `.npy` map.
pub fn read_prediction(path: &Path) -> Result<Array2<f64>> {
    let decode_err = |reason: String| Error::Decode {
        path: path.display().to_string(),
        reason,
    };
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy")) {
        let file = std::fs::File::open(path)?;
        if let Ok(a) = <Array2<f64> as ndarray_npy::ReadNpyExt>::read_npy(&file) {
            return Ok(a);
        }
        let file = std::fs::File::open(path)?;
        let a = <Array2<f32> as ndarray_npy::ReadNpyExt>::read_npy(file).map_err(|e| decode_err(e.to_string()))?;
        return Ok(a.mapv(f64::from));
    }
    let bytes = std::fs::read(path)?;
    decode_scores(&bytes).map_err(|e| match e {
        Error::Decode { reason, .. } => decode_err(reason),
        other => other,
    })
}

/// Scores every ground-truth mask in `gt_dir` against the prediction with the same stem.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, method: &str, modality: &str) -> Result<SegReport> {
    let mut gts: Vec<_> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    gts.sort();
    let mut records = Vec::with_capacity(gts.len());
    for gt_path in gts {
        let stem = file_stem(&gt_path);
        let pred_path = ["png", "npy"]
            .iter()
            .map(|ext| pred_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no prediction for `{stem}` in {}", pred_dir.display()),
                ))
            })?;
        let gt = crate::data::load_mask(&gt_path)?;
        let scores = read_prediction(&pred_path)?;
        records.push(evaluate_scores(&stem, scores.view(), &gt)?);
    }
    Ok(SegReport::new(method, modality, records))
}
