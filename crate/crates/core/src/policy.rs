//! Checkpoint planning: full vs. incremental, which rows go into an
//! increment, and which bit width to quantize with.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::tracker::{Scope, Tracker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    FullOnly,
    /// Every increment holds all rows modified since the baseline.
    OneShotBaseline,
    /// Every increment holds only rows modified during the last interval.
    ConsecutiveIncrement,
    /// One-shot increments with a new baseline whenever the predictor says a
    /// full checkpoint is cheaper over the coming intervals.
    Intermittent,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::FullOnly,
        PolicyKind::OneShotBaseline,
        PolicyKind::ConsecutiveIncrement,
        PolicyKind::Intermittent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::FullOnly => "full_only",
            PolicyKind::OneShotBaseline => "one_shot_baseline",
            PolicyKind::ConsecutiveIncrement => "consecutive_increment",
            PolicyKind::Intermittent => "intermittent",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointKind {
    Full,
    Incremental,
}

impl CheckpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointKind::Full => "full",
            CheckpointKind::Incremental => "incremental",
        }
    }
}

/// Sizes `S_1..S_i` of the increments taken since the last baseline, each as
/// a fraction of the baseline (`S_0 = 1`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalHistory {
    sizes: Vec<f64>,
}

impl IntervalHistory {
    pub fn new() -> Self {
        IntervalHistory::default()
    }

    pub fn from_sizes(sizes: Vec<f64>) -> Result<Self> {
        let mut h = IntervalHistory::new();
        for s in sizes {
            h.push(s)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, size: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&size) {
            return Err(Error::Config(alloc::format!("increment size {size} outside [0, 1]")));
        }
        self.sizes.push(size);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.sizes.clear();
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Projected cost of the next `i + 1` intervals if a new baseline is taken
    /// now: `1 + S_1 + ... + S_i`.
    pub fn full_cost(&self) -> f64 {
        1.0 + self.sizes.iter().sum::<f64>()
    }

    /// Lower bound on the cost of the next `i + 1` intervals if increments
    /// continue: `(i + 1) * S_i`.
    pub fn incremental_cost(&self) -> f64 {
        let i = self.sizes.len();
        (i as f64 + 1.0) * self.sizes.last().copied().unwrap_or(0.0)
    }
}

/// Full iff `F_c <= I_c`. With no increments since the baseline the answer is
/// always incremental.
pub fn intermittent_decide(history: &IntervalHistory) -> CheckpointKind {
    if history.is_empty() {
        return CheckpointKind::Incremental;
    }
    if history.full_cost() <= history.incremental_cost() {
        CheckpointKind::Full
    } else {
        CheckpointKind::Incremental
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowSelection {
    All,
    /// Strictly increasing row indices.
    Rows(Vec<u64>),
}

impl RowSelection {
    pub fn count(&self, table_rows: usize) -> usize {
        match self {
            RowSelection::All => table_rows,
            RowSelection::Rows(r) => r.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPlan {
    pub kind: CheckpointKind,
    /// One entry per table, indexed by table id.
    pub tables: Vec<RowSelection>,
    /// `None` stores full-precision rows.
    pub bitwidth: Option<BitWidth>,
}

impl CheckpointPlan {
    pub fn full(num_tables: usize, bitwidth: Option<BitWidth>) -> Self {
        CheckpointPlan {
            kind: CheckpointKind::Full,
            tables: (0..num_tables).map(|_| RowSelection::All).collect(),
            bitwidth,
        }
    }

    pub fn row_count(&self, rows_per_table: &[usize]) -> usize {
        self.tables.iter().zip(rows_per_table).map(|(sel, &rows)| sel.count(rows)).sum()
    }

    /// Planned rows as a fraction of all rows.
    pub fn row_fraction(&self, rows_per_table: &[usize]) -> f64 {
        let total: usize = rows_per_table.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.row_count(rows_per_table) as f64 / total as f64
    }
}

/// Pure planning step. `has_baseline` is false until the first full
/// checkpoint of a chain has committed.
pub fn plan_checkpoint(
    policy: PolicyKind,
    tracker: &Tracker,
    history: &IntervalHistory,
    has_baseline: bool,
    bitwidth: Option<BitWidth>,
) -> CheckpointPlan {
    let n = tracker.num_tables();
    let incremental = |scope: Scope| CheckpointPlan {
        kind: CheckpointKind::Incremental,
        tables: tracker.scope(scope).iter().map(|b| RowSelection::Rows(b.dirty_rows().0)).collect(),
        bitwidth,
    };
    if !has_baseline {
        return CheckpointPlan::full(n, bitwidth);
    }
    match policy {
        PolicyKind::FullOnly => CheckpointPlan::full(n, bitwidth),
        PolicyKind::OneShotBaseline => incremental(Scope::SinceBaseline),
        PolicyKind::ConsecutiveIncrement => incremental(Scope::Interval),
        PolicyKind::Intermittent => match intermittent_decide(history) {
            CheckpointKind::Full => CheckpointPlan::full(n, bitwidth),
            CheckpointKind::Incremental => incremental(Scope::SinceBaseline),
        },
    }
}

/// Planning state carried across intervals of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    policy: PolicyKind,
    history: IntervalHistory,
    has_baseline: bool,
}

impl Planner {
    pub fn new(policy: PolicyKind) -> Self {
        Planner { policy, history: IntervalHistory::new(), has_baseline: false }
    }

    /// Continues an existing chain, e.g. after a restore.
    pub fn resume(policy: PolicyKind, history: IntervalHistory) -> Self {
        Planner { policy, history, has_baseline: true }
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn history(&self) -> &IntervalHistory {
        &self.history
    }

    pub fn has_baseline(&self) -> bool {
        self.has_baseline
    }

    pub fn plan(&self, tracker: &Tracker, bitwidth: Option<BitWidth>) -> CheckpointPlan {
        plan_checkpoint(self.policy, tracker, &self.history, self.has_baseline, bitwidth)
    }

    /// Records a committed checkpoint. A full checkpoint starts a new history.
    pub fn on_committed(&mut self, kind: CheckpointKind, row_fraction: f64) -> Result<()> {
        match kind {
            CheckpointKind::Full => {
                self.history.clear();
                self.has_baseline = true;
                Ok(())
            }
            CheckpointKind::Incremental => self.history.push(row_fraction.clamp(0.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureModel {
    /// Per-node failure probability per hour.
    pub p: f64,
    pub nodes: u32,
    pub expected_duration_hours: f64,
}

impl FailureModel {
    pub fn new(p: f64, nodes: u32, expected_duration_hours: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("failure probability must lie in [0, 1]"));
        }
        if nodes == 0 {
            return Err(Error::config("failure model needs at least one node"));
        }
        if expected_duration_hours.is_nan() || expected_duration_hours < 0.0 {
            return Err(Error::config("expected duration must be non-negative"));
        }
        Ok(FailureModel { p, nodes, expected_duration_hours })
    }
}

/// Expected resume count, `p * nodes * hours` (independent failures,
/// first-order).
pub fn expected_failures(fm: &FailureModel) -> f64 {
    fm.p * fm.nodes as f64 * fm.expected_duration_hours
}

/// How many resumes from a checkpoint each bit width tolerates.
pub fn resume_allowance(bitwidth: BitWidth) -> u64 {
    match bitwidth {
        BitWidth::B2 => 1,
        BitWidth::B3 => 3,
        BitWidth::B4 => 20,
        BitWidth::B8 => u64::MAX,
    }
}

/// Narrowest bit width whose allowance covers `ceil(expected_resumes)`.
pub fn select_bitwidth(expected_resumes: f64) -> BitWidth {
    let needed = libm::ceil(expected_resumes.max(0.0));
    [BitWidth::B2, BitWidth::B3, BitWidth::B4]
        .into_iter()
        .find(|&n| needed <= resume_allowance(n) as f64)
        .unwrap_or(BitWidth::B8)
}

/// 8 bits once the actual resume count exceeds what `selected` allows.
pub fn fallback_check(actual_resumes: u64, selected: BitWidth) -> BitWidth {
    if actual_resumes > resume_allowance(selected) {
        BitWidth::B8
    } else {
        selected
    }
}

/// Parses a policy name, for config files.
pub fn parse_policy(s: &str) -> Result<PolicyKind> {
    s.trim().parse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn hist(s: &[f64]) -> IntervalHistory {
        IntervalHistory::from_sizes(s.to_vec()).unwrap()
    }

    #[test]
    fn predictor_examples() {
        let h = hist(&[0.25, 0.30, 0.35]);
        assert!((h.full_cost() - 1.90).abs() < 1e-12);
        assert!((h.incremental_cost() - 1.40).abs() < 1e-12);
        assert_eq!(intermittent_decide(&h), CheckpointKind::Incremental);

        let h = hist(&[0.5; 5]);
        assert!((h.full_cost() - 3.5).abs() < 1e-12);
        assert!((h.incremental_cost() - 3.0).abs() < 1e-12);
        assert_eq!(intermittent_decide(&h), CheckpointKind::Incremental);
        // constant S never triggers: 1 + 0.5 i > 0.5 (i + 1)
        for i in 1..200 {
            assert_eq!(intermittent_decide(&hist(&vec![0.5; i])), CheckpointKind::Incremental);
        }
        assert_eq!(intermittent_decide(&IntervalHistory::new()), CheckpointKind::Incremental);
    }

    #[test]
    fn predictor_tie_goes_full() {
        // 1 + 0 + 1 = 2 = (2) * 1
        assert_eq!(intermittent_decide(&hist(&[0.0, 1.0])), CheckpointKind::Full);
    }

    #[test]
    fn history_rejects_out_of_range() {
        assert!(IntervalHistory::new().push(1.5).is_err());
        assert!(IntervalHistory::new().push(-0.1).is_err());
    }

    fn tracker_with(rows: &[u64]) -> Tracker {
        let mut t = Tracker::new(&ModelConfig::uniform(2, 8, 2, 1));
        t.mark(0, rows).unwrap();
        t
    }

    #[test]
    fn first_checkpoint_is_full() {
        let t = tracker_with(&[1]);
        for p in PolicyKind::ALL {
            let plan = plan_checkpoint(p, &t, &IntervalHistory::new(), false, None);
            assert_eq!(plan.kind, CheckpointKind::Full);
            assert_eq!(plan.tables, vec![RowSelection::All, RowSelection::All]);
        }
    }

    #[test]
    fn one_shot_uses_since_baseline() {
        let mut t = tracker_with(&[5, 1]);
        t.reset_interval();
        let plan = plan_checkpoint(PolicyKind::OneShotBaseline, &t, &IntervalHistory::new(), true, None);
        assert_eq!(plan.kind, CheckpointKind::Incremental);
        assert_eq!(plan.tables[0], RowSelection::Rows(vec![1, 5]));
        assert_eq!(plan.tables[1], RowSelection::Rows(vec![]));
    }

    #[test]
    fn consecutive_with_empty_interval_is_empty_plan() {
        let mut t = tracker_with(&[5, 1]);
        t.reset_interval();
        let plan = plan_checkpoint(PolicyKind::ConsecutiveIncrement, &t, &IntervalHistory::new(), true, None);
        assert_eq!(plan.kind, CheckpointKind::Incremental);
        assert_eq!(plan.row_count(&[8, 8]), 0);
    }

    #[test]
    fn intermittent_consults_predictor() {
        let t = tracker_with(&[2]);
        let plan = plan_checkpoint(PolicyKind::Intermittent, &t, &hist(&[0.0, 1.0]), true, None);
        assert_eq!(plan.kind, CheckpointKind::Full);
        let plan = plan_checkpoint(PolicyKind::Intermittent, &t, &hist(&[0.2]), true, None);
        assert_eq!(plan.kind, CheckpointKind::Incremental);
    }

    #[test]
    fn planner_resets_history_on_full() {
        let mut p = Planner::new(PolicyKind::Intermittent);
        p.on_committed(CheckpointKind::Full, 1.0).unwrap();
        p.on_committed(CheckpointKind::Incremental, 0.3).unwrap();
        assert_eq!(p.history().sizes(), &[0.3]);
        p.on_committed(CheckpointKind::Full, 1.0).unwrap();
        assert!(p.history().is_empty());
        assert!(p.has_baseline());
    }

    #[test]
    fn expected_failures_examples() {
        assert_eq!(expected_failures(&FailureModel::new(0.0, 16, 72.0).unwrap()), 0.0);
        let l = expected_failures(&FailureModel::new(0.001, 16, 72.0).unwrap());
        assert!((l - 1.152).abs() < 1e-12);
        let l = expected_failures(&FailureModel::new(0.01, 128, 96.0).unwrap());
        assert!((l - 122.88).abs() < 1e-9);
        assert_eq!(select_bitwidth(l), BitWidth::B8);
        assert!(FailureModel::new(1.5, 1, 1.0).is_err());
        assert!(FailureModel::new(0.1, 0, 1.0).is_err());
    }

    #[test]
    fn bitwidth_table() {
        let cases = [
            (0.0, BitWidth::B2),
            (1.0, BitWidth::B2),
            (1.152, BitWidth::B3),
            (2.0, BitWidth::B3),
            (3.0, BitWidth::B3),
            (4.0, BitWidth::B4),
            (20.0, BitWidth::B4),
            (21.0, BitWidth::B8),
            (150.0, BitWidth::B8),
        ];
        for (l, n) in cases {
            assert_eq!(select_bitwidth(l), n, "L = {l}");
        }
    }

    #[test]
    fn fallback_examples() {
        assert_eq!(fallback_check(1, BitWidth::B2), BitWidth::B2);
        assert_eq!(fallback_check(2, BitWidth::B2), BitWidth::B8);
        assert_eq!(fallback_check(3, BitWidth::B3), BitWidth::B3);
        assert_eq!(fallback_check(4, BitWidth::B3), BitWidth::B8);
        assert_eq!(fallback_check(20, BitWidth::B4), BitWidth::B4);
        assert_eq!(fallback_check(25, BitWidth::B4), BitWidth::B8);
        assert_eq!(fallback_check(10_000, BitWidth::B8), BitWidth::B8);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(parse_policy(p.as_str()).unwrap(), p);
        }
        assert!(parse_policy("nope").is_err());
    }

    proptest! {
        #[test]
        fn decide_matches_formula(sizes in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
            let h = hist(&sizes);
            let i = sizes.len() as f64;
            let fc = 1.0 + sizes.iter().sum::<f64>();
            let ic = (i + 1.0) * sizes[sizes.len() - 1];
            let want = if fc <= ic { CheckpointKind::Full } else { CheckpointKind::Incremental };
            prop_assert_eq!(intermittent_decide(&h), want);
        }

        #[test]
        fn select_is_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_bitwidth(lo) <= select_bitwidth(hi));
        }
    }
}
