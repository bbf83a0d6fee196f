use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Confusion counts of a binary classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (gold, pred) in pairs {
            c.record(gold, pred);
        }
        c
    }

    pub fn record(&mut self, gold: bool, pred: bool) {
        match (gold, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `2PR/(P+R)`, 0 when both are 0. Works on fractions or percentages alike.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Harmonic mean of seen and unseen accuracy.
pub fn harmonic(s: f64, u: f64) -> f64 {
    f1(s, u)
}

/// Mean over gold classes of the per-class accuracy. Classes that never
/// occur as gold do not count.
pub fn class_balanced_accuracy<C: Ord>(pairs: impl IntoIterator<Item = (C, C)>) -> f64 {
    let mut per: BTreeMap<C, (usize, usize)> = BTreeMap::new();
    for (gold, pred) in pairs {
        let hit = gold == pred;
        let e = per.entry(gold).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ZslMetrics {
    /// Unseen images against unseen candidates.
    pub t1: f64,
    /// Seen images against all candidates.
    pub s: f64,
    /// Unseen images against all candidates.
    pub u: f64,
    pub h: f64,
}

/// Named metric values of one evaluation, in report order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub task: String,
    pub values: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn new(task: &str) -> Self {
        Self {
            task: task.to_owned(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, v: f64) -> &mut Self {
        self.values.push((name.to_owned(), v));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn tc(c: &Confusion) -> Self {
        let mut r = Self::new("tc");
        r.push("accuracy", c.accuracy())
            .push("precision", c.precision())
            .push("recall", c.recall())
            .push("f1", c.f1())
            .push("tp", c.tp as f64)
            .push("fp", c.fp as f64)
            .push("tn", c.tn as f64)
            .push("fn", c.fn_ as f64);
        r
    }

    pub fn zsl(m: &ZslMetrics) -> Self {
        let mut r = Self::new("zsl");
        r.push("t1", m.t1).push("s", m.s).push("u", m.u).push("h", m.h);
        r
    }

    pub fn qa(accuracy: f64, groups: usize) -> Self {
        let mut r = Self::new("qa");
        r.push("accuracy", accuracy).push("groups", groups as f64);
        r
    }

    /// Header `task,metric,value`, one row per metric, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value\n");
        for (n, v) in &self.values {
            writeln!(out, "{},{n},{v}", self.task).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        let width = self.values.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = format!("{} evaluation\n", self.task);
        for (n, v) in &self.values {
            writeln!(out, "  {n:<width$}  {v:.4}").unwrap();
        }
        out
    }
}

/// Position of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}
