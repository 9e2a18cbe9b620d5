//! Cut-off policies: on an update arrival a node with no interested
//! neighbors decides from its local popularity measure whether to keep
//! receiving updates for a key or to push a clear-bit upstream.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutoffPolicy {
    /// Updates reach only nodes at most `p` hops from the authority.
    /// `p = 0` is standard expiration-based caching.
    PushLevel(u32),
    /// Popular iff at least `alpha * D` queries arrived since the last update.
    Linear { alpha: f64 },
    /// Popular iff at least `alpha * lg(D)` queries arrived since the last update.
    Logarithmic { alpha: f64 },
    /// Cut off at the second consecutive update arrival with no queries in between.
    SecondChance,
    /// Generalized history policy: cut off once `zero_intervals` consecutive
    /// inter-update intervals saw no queries.
    LogBased { zero_intervals: u32 },
}

impl CutoffPolicy {
    pub const STANDARD_CACHING: CutoffPolicy = CutoffPolicy::PushLevel(0);
    pub const ALL_OUT: CutoffPolicy = CutoffPolicy::PushLevel(u32::MAX);

    pub fn validate(&self) -> Result<(), PolicyError> {
        match *self {
            CutoffPolicy::Linear { alpha } | CutoffPolicy::Logarithmic { alpha }
                if !(alpha > 0.0 && alpha.is_finite()) =>
            {
                Err(PolicyError::BadAlpha(alpha))
            }
            CutoffPolicy::LogBased { zero_intervals: 0 } => Err(PolicyError::BadWindow),
            _ => Ok(()),
        }
    }

    pub fn is_standard_caching(&self) -> bool {
        *self == Self::STANDARD_CACHING
    }

    /// Whether a node may push a non-response update to a child that sits
    /// `child_distance` hops from the authority.
    pub fn allows_push_to(&self, child_distance: u32) -> bool {
        match *self {
            CutoffPolicy::PushLevel(p) => child_distance <= p,
            _ => true,
        }
    }

    /// Short label used in CSV rows and on the command line.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

/// Inputs to a cut-off decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PolicyContext {
    pub distance_to_authority: u32,
    pub popularity: u32,
    pub consecutive_zero_updates: u32,
}

/// `true` keeps the subscription, `false` means push a clear-bit.
pub fn should_continue(policy: &CutoffPolicy, ctx: &PolicyContext) -> bool {
    let d = ctx.distance_to_authority;
    let pop = ctx.popularity as f64;
    match *policy {
        CutoffPolicy::PushLevel(p) => d <= p,
        CutoffPolicy::Linear { alpha } => pop >= alpha * d as f64,
        // lg(1) = 0 would make every neighbor of the authority popular
        // unconditionally; the threshold bottoms out at alpha * lg(2).
        CutoffPolicy::Logarithmic { alpha } => pop >= alpha * (d.max(2) as f64).log2(),
        CutoffPolicy::SecondChance => ctx.consecutive_zero_updates < 2,
        CutoffPolicy::LogBased { zero_intervals } => ctx.consecutive_zero_updates < zero_intervals,
    }
}

/// Per-key popularity bookkeeping owned by a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PolicyScratch {
    pub popularity: u32,
    pub consecutive_zero_updates: u32,
}

impl PolicyScratch {
    pub fn on_query(&mut self) {
        self.popularity += 1;
        self.consecutive_zero_updates = 0;
    }

    pub fn on_trigger_update(&mut self) {
        if self.popularity == 0 {
            self.consecutive_zero_updates += 1;
        } else {
            self.consecutive_zero_updates = 0;
        }
        self.popularity = 0;
    }

    /// Runs the trigger bookkeeping and returns the decision. The popularity
    /// seen by the threshold policies is the count before the reset.
    pub fn evaluate(&mut self, policy: &CutoffPolicy, distance_to_authority: u32) -> bool {
        let popularity = self.popularity;
        self.on_trigger_update();
        let ctx = PolicyContext {
            distance_to_authority,
            popularity,
            consecutive_zero_updates: self.consecutive_zero_updates,
        };
        should_continue(policy, &ctx)
    }

    /// Decision without consuming the interval, used when a clear-bit from a
    /// child leaves the node with no interested neighbors.
    pub fn peek(&self, policy: &CutoffPolicy, distance_to_authority: u32) -> bool {
        let ctx = PolicyContext {
            distance_to_authority,
            popularity: self.popularity,
            consecutive_zero_updates: self.consecutive_zero_updates,
        };
        match policy {
            // Zero queries so far in the current interval count as a pending
            // zero interval for the history policies.
            CutoffPolicy::SecondChance | CutoffPolicy::LogBased { .. } if self.popularity == 0 => should_continue(
                policy,
                &PolicyContext { consecutive_zero_updates: ctx.consecutive_zero_updates + 1, ..ctx },
            ),
            _ => should_continue(policy, &ctx),
        }
    }
}

/// When the cut-off decision is re-evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopularityMode {
    /// Every update arrival is a decision point.
    #[default]
    Naive,
    /// Only updates originating at one designated replica are decision
    /// points, so the decision rate does not grow with the replica count.
    ReplicaIndependent,
}

impl fmt::Display for PopularityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PopularityMode::Naive => "naive",
            PopularityMode::ReplicaIndependent => "replica-independent",
        })
    }
}

impl FromStr for PopularityMode {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(PopularityMode::Naive),
            "replica-independent" | "replica_independent" | "fixed" => Ok(PopularityMode::ReplicaIndependent),
            _ => Err(PolicyError::Unknown(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("log-based window must be at least 1")]
    BadWindow,
    #[error("unknown policy `{0}` (expected standard, all-out, push:<p>, linear:<alpha>, log:<alpha>, second-chance, log-based:<n>)")]
    Unknown(String),
}

impl fmt::Display for CutoffPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CutoffPolicy::PushLevel(0) => write!(f, "standard"),
            CutoffPolicy::PushLevel(u32::MAX) => write!(f, "all-out"),
            CutoffPolicy::PushLevel(p) => write!(f, "push:{p}"),
            CutoffPolicy::Linear { alpha } => write!(f, "linear:{alpha}"),
            CutoffPolicy::Logarithmic { alpha } => write!(f, "log:{alpha}"),
            CutoffPolicy::SecondChance => write!(f, "second-chance"),
            CutoffPolicy::LogBased { zero_intervals } => write!(f, "log-based:{zero_intervals}"),
        }
    }
}

impl FromStr for CutoffPolicy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || PolicyError::Unknown(s.to_string());
        let s = s.trim();
        let policy = match s.split_once(':') {
            None => match s {
                "standard" => CutoffPolicy::STANDARD_CACHING,
                "all-out" => CutoffPolicy::ALL_OUT,
                "second-chance" | "second_chance" => CutoffPolicy::SecondChance,
                _ => return Err(unknown()),
            },
            Some((name, arg)) => match name {
                "push" => CutoffPolicy::PushLevel(arg.parse().map_err(|_| unknown())?),
                "linear" => CutoffPolicy::Linear { alpha: arg.parse().map_err(|_| unknown())? },
                "log" | "logarithmic" => CutoffPolicy::Logarithmic { alpha: arg.parse().map_err(|_| unknown())? },
                "log-based" => CutoffPolicy::LogBased { zero_intervals: arg.parse().map_err(|_| unknown())? },
                _ => return Err(unknown()),
            },
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(d: u32, pop: u32, zeros: u32) -> PolicyContext {
        PolicyContext { distance_to_authority: d, popularity: pop, consecutive_zero_updates: zeros }
    }

    #[test]
    fn linear_threshold() {
        let p = CutoffPolicy::Linear { alpha: 0.25 };
        assert!(!should_continue(&p, &ctx(8, 1, 0)));
        assert!(should_continue(&p, &ctx(8, 2, 0)));
    }

    #[test]
    fn logarithmic_threshold_floors_at_distance_two() {
        let p = CutoffPolicy::Logarithmic { alpha: 0.5 };
        assert!(!should_continue(&p, &ctx(1, 0, 0)));
        assert!(should_continue(&p, &ctx(1, 1, 0)));
        // 0.5 * lg 16 = 2
        assert!(!should_continue(&p, &ctx(16, 1, 0)));
        assert!(should_continue(&p, &ctx(16, 2, 0)));
    }

    #[test]
    fn second_chance_sequence() {
        let mut s = PolicyScratch::default();
        assert!(s.evaluate(&CutoffPolicy::SecondChance, 5));
        assert_eq!(s, PolicyScratch { popularity: 0, consecutive_zero_updates: 1 });
        assert!(!s.evaluate(&CutoffPolicy::SecondChance, 5));
        assert_eq!(s.consecutive_zero_updates, 2);
    }

    #[test]
    fn query_then_trigger_keeps_second_chance() {
        let mut s = PolicyScratch { popularity: 0, consecutive_zero_updates: 1 };
        s.on_query();
        assert_eq!(s, PolicyScratch { popularity: 1, consecutive_zero_updates: 0 });
        s.on_query();
        assert_eq!(s.popularity, 2);
        assert!(s.evaluate(&CutoffPolicy::SecondChance, 3));
    }

    #[test]
    fn trigger_update_scratch_transitions() {
        let mut s = PolicyScratch::default();
        s.on_trigger_update();
        assert_eq!(s, PolicyScratch { popularity: 0, consecutive_zero_updates: 1 });
        let mut s = PolicyScratch { popularity: 3, consecutive_zero_updates: 1 };
        s.on_trigger_update();
        assert_eq!(s, PolicyScratch { popularity: 0, consecutive_zero_updates: 0 });
        let mut s = PolicyScratch { popularity: 0, consecutive_zero_updates: 1 };
        s.on_trigger_update();
        assert_eq!(s.consecutive_zero_updates, 2);
        assert!(!should_continue(&CutoffPolicy::SecondChance, &ctx(4, 0, s.consecutive_zero_updates)));
    }

    #[test]
    fn push_level_zero_is_standard_caching() {
        for d in 1..100 {
            assert!(!should_continue(&CutoffPolicy::STANDARD_CACHING, &ctx(d, 1000, 0)));
            assert!(!CutoffPolicy::STANDARD_CACHING.allows_push_to(d));
        }
        assert!(CutoffPolicy::PushLevel(3).allows_push_to(3));
        assert!(!CutoffPolicy::PushLevel(3).allows_push_to(4));
    }

    #[test]
    fn parse_round_trip() {
        for s in ["standard", "all-out", "push:7", "linear:0.25", "log:0.01", "second-chance", "log-based:3"] {
            let p: CutoffPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("linear:-1".parse::<CutoffPolicy>().is_err());
        assert!("bogus".parse::<CutoffPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn all_out_never_cuts_off(d in 0u32..10_000, pop in 0u32..100, zeros in 0u32..100) {
            prop_assert!(should_continue(&CutoffPolicy::ALL_OUT, &ctx(d, pop, zeros)));
        }

        #[test]
        fn linear_monotone_in_alpha(a in 0.001f64..2.0, b in 0.001f64..2.0, d in 1u32..64, pop in 0u32..64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = ctx(d, pop, 0);
            let (strict, loose) = (CutoffPolicy::Linear { alpha: hi }, CutoffPolicy::Linear { alpha: lo });
            if should_continue(&strict, &c) {
                prop_assert!(should_continue(&loose, &c));
            }
        }

        #[test]
        fn log_no_stricter_than_linear(alpha in 0.001f64..2.0, d in 2u32..64, pop in 0u32..64) {
            let c = ctx(d, pop, 0);
            let (lin, log) = (CutoffPolicy::Linear { alpha }, CutoffPolicy::Logarithmic { alpha });
            if should_continue(&lin, &c) {
                prop_assert!(should_continue(&log, &c));
            }
        }

        #[test]
        fn second_chance_ignores_distance(d1 in 1u32..100, d2 in 1u32..100, pop in 0u32..5, zeros in 0u32..5) {
            prop_assert_eq!(
                should_continue(&CutoffPolicy::SecondChance, &ctx(d1, pop, zeros)),
                should_continue(&CutoffPolicy::SecondChance, &ctx(d2, pop, zeros))
            );
        }
    }
}
