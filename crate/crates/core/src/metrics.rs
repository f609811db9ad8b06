//! Edge and semantic evaluation from dataset-level confusion counts.
//!
//! Counts are accumulated over every evaluated image first and the scores
//! are computed once at the end, so results do not depend on batch order.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::synthdata::CLASS_NAMES;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn binarize(m: &Array2<f64>, threshold: f64) -> Result<Array2<f64>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    Ok(m.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl EdgeCounts {
    pub fn from_masks(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p >= 0.5, g >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn scores(&self) -> EdgeScores {
        let mut degenerate = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let iou = ratio(self.tp, self.tp + self.fp + self.fn_);
        let accuracy = ratio(self.tp + self.tn, self.total());
        // 2PR/(P+R) written on counts so that IoU = F1/(2-F1) holds exactly.
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        EdgeScores { miou: iou, f1, precision, recall, accuracy, degenerate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeScores {
    /// Edge-class IoU, `tp / (tp + fp + fn)`.
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl EdgeScores {
    pub fn keys() -> [&'static str; 5] {
        ["mIoU", "F1", "precision", "recall", "accuracy"]
    }

    pub fn values(&self) -> [f64; 5] {
        [self.miou, self.f1, self.precision, self.recall, self.accuracy]
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::keys().iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {:>8} | {:>8} | {:>9} | {:>8} | {:>8} |", "mIoU", "F1-Score", "Precision", "Recall", "Accuracy");
        let v = self.values().map(|x| x * 100.0);
        let _ = writeln!(s, "| {:>8.1} | {:>8.1} | {:>9.1} | {:>8.1} | {:>8.1} |", v[0], v[1], v[2], v[3], v[4]);
        s
    }
}

/// Edge-class IoU implied by an F1 score from the same counts.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

pub fn edge_metrics(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<EdgeScores> {
    Ok(EdgeCounts::from_masks(pred, gt)?.scores())
}

/// `C x C` confusion matrix, rows indexed by ground truth, columns by
/// prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub matrix: Array2<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { matrix: Array2::zeros((classes, classes)) }
    }

    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let c = self.classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p as usize >= c || g as usize >= c {
                return Err(Error::invalid("class index", format!("{} >= class count {c}", p.max(g))));
            }
            self.matrix[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        self.matrix += &other.matrix;
        Ok(())
    }

    pub fn scores(&self) -> SemanticScores {
        let c = self.classes();
        let total: u64 = self.matrix.sum();
        let trace: u64 = (0..c).map(|i| self.matrix[[i, i]]).sum();
        let mut per_class = vec![None; c];
        for (i, slot) in per_class.iter_mut().enumerate() {
            let tp = self.matrix[[i, i]];
            let row: u64 = self.matrix.row(i).sum();
            let col: u64 = self.matrix.column(i).sum();
            let union = row + col - tp;
            if union > 0 {
                *slot = Some(tp as f64 / union as f64);
            }
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        SemanticScores { per_class_iou: per_class, miou, accuracy }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticScores {
    /// `None` for classes absent from both prediction and ground truth;
    /// those are left out of the mean.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

impl SemanticScores {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class_iou.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect()
    }

    fn class_name(i: usize) -> String {
        CLASS_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("class{i}"))
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mIoU = {:.6}", self.miou);
        for (i, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "IoU_{} = {v:.6}", Self::class_name(i));
                }
                None => {
                    let _ = writeln!(s, "IoU_{} = absent", Self::class_name(i));
                }
            }
        }
        let _ = writeln!(s, "accuracy = {:.6}", self.accuracy);
        s
    }

    pub fn to_table(&self) -> String {
        let mut head = format!("| {:>8} |", "mIoU");
        let mut row = format!("| {:>8.1} |", self.miou * 100.0);
        for (i, v) in self.per_class_iou.iter().enumerate() {
            let name = Self::class_name(i);
            let w = name.len().max(6);
            head += &format!(" {name:>w$} |");
            row += &match v {
                Some(v) => format!(" {:>w$.1} |", v * 100.0),
                None => format!(" {:>w$} |", "-"),
            };
        }
        head += &format!(" {:>8} |", "Accuracy");
        row += &format!(" {:>8.1} |", self.accuracy * 100.0);
        format!("{head}\n{row}\n")
    }
}

pub fn semantic_metrics(pred: &Array2<u8>, gt: &Array2<u8>, classes: usize) -> Result<SemanticScores> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    Ok(c.scores())
}

/// Argmax over the class axis of a `[C, H, W]` probability map.
pub fn argmax_classes(y: &ndarray::ArrayView3<f64>) -> Array2<u8> {
    let (c, h, w) = y.dim();
    Array2::from_shape_fn((h, w), |(r, x)| {
        let mut best = 0;
        for k in 1..c {
            if y[[k, r, x]] > y[[best, r, x]] {
                best = k;
            }
        }
        best as u8
    })
}
