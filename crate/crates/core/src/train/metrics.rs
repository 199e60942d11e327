use serde::Serialize;

/// Binary confusion counts with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(labels: &[u8], predictions: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fn_ += 1,
                (_, 1) => c.fp += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let total = c.total();
        let accuracy = if total == 0 {
            0.0
        } else {
            (c.tp + c.tn) as f64 / total as f64
        };
        let f1_pos = f1(c.tp, c.fp, c.fn_);
        let f1_neg = f1(c.tn, c.fn_, c.fp);
        Metrics {
            accuracy,
            macro_f1: (f1_pos + f1_neg) / 2.0,
            confusion: c,
        }
    }

    pub fn from_pairs(labels: &[u8], predictions: &[u8]) -> Self {
        Metrics::from_confusion(Confusion::from_pairs(labels, predictions))
    }
}
