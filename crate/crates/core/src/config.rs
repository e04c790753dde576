//! Boundary configurations: the active point on the spectrum between an
//! ordinary trap-based process and a fully optimized linked application.

use thiserror::Error;

/// How the main application reaches kernel services.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    /// Ordinary process: every transition pays the privilege switch.
    Trap,
    /// Application statically linked with the kernel; transitions are calls.
    LinkedBase,
}

/// Raw optimization flags, unvalidated. Mirrors the configuration options
/// one-to-one: `byp` bypasses entry/exit checks, `nss`/`nss_ps` avoid stack
/// switches (demand-paged vs pinned user stacks), `ret` replaces `iret` with
/// a staged plain return, and `pf_df`/`pf_ss` choose the fault-stack policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlagSet {
    pub byp: bool,
    pub nss: bool,
    pub nss_ps: bool,
    pub ret: bool,
    pub pf_df: bool,
    pub pf_ss: bool,
}

impl FlagSet {
    fn any(&self) -> bool {
        self.byp || self.nss || self.nss_ps || self.ret || self.pf_df || self.pf_ss
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("ConflictingFlags: {0} are mutually exclusive")]
    ConflictingFlags(&'static str),
    #[error("FlagsRequireLinked: optimization flags require the linked baseline")]
    FlagsRequireLinked,
    #[error("MissingFaultPolicy: nss/nss_ps need pf_df or pf_ss for stackless kernel faults")]
    MissingFaultPolicy,
    #[error("UnknownFlag: `{0}` is not a configuration flag")]
    UnknownFlag(String),
}

/// A validated boundary configuration. Construction is total: every flag set
/// maps to exactly one of a valid config or a specific [`ConfigError`];
/// conflicting flags are never silently normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryConfig {
    baseline: Baseline,
    flags: FlagSet,
}

impl BoundaryConfig {
    pub fn new(baseline: Baseline, flags: FlagSet) -> Result<BoundaryConfig, ConfigError> {
        if flags.nss && flags.nss_ps {
            return Err(ConfigError::ConflictingFlags("nss and nss_ps"));
        }
        if flags.pf_df && flags.pf_ss {
            return Err(ConfigError::ConflictingFlags("pf_df and pf_ss"));
        }
        if baseline == Baseline::Trap && flags.any() {
            return Err(ConfigError::FlagsRequireLinked);
        }
        if (flags.nss || flags.nss_ps) && !(flags.pf_df || flags.pf_ss) {
            return Err(ConfigError::MissingFaultPolicy);
        }
        Ok(BoundaryConfig { baseline, flags })
    }

    /// Plain-process baseline with no optimization flags.
    pub fn trap() -> BoundaryConfig {
        BoundaryConfig {
            baseline: Baseline::Trap,
            flags: FlagSet::default(),
        }
    }

    /// Linked base model with no optimization flags.
    pub fn base() -> BoundaryConfig {
        BoundaryConfig {
            baseline: Baseline::LinkedBase,
            flags: FlagSet::default(),
        }
    }

    /// Linked config from a flag set, validating the combination.
    pub fn linked(flags: FlagSet) -> Result<BoundaryConfig, ConfigError> {
        BoundaryConfig::new(Baseline::LinkedBase, flags)
    }

    /// Parses a comma-separated lowercase flag list against a baseline, e.g.
    /// `parse_flags("ret,byp")`.
    pub fn parse_flags(list: &str) -> Result<FlagSet, ConfigError> {
        let mut flags = FlagSet::default();
        for token in list.split(',') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            match token {
                "byp" => flags.byp = true,
                "nss" => flags.nss = true,
                "nss_ps" => flags.nss_ps = true,
                "ret" => flags.ret = true,
                "pf_df" => flags.pf_df = true,
                "pf_ss" => flags.pf_ss = true,
                other => return Err(ConfigError::UnknownFlag(other.to_string())),
            }
        }
        Ok(flags)
    }

    /// Parses a full config spec: `trap`, `base`, or a flag list such as
    /// `ret,byp` (which implies the linked baseline).
    pub fn parse(spec: &str) -> Result<BoundaryConfig, ConfigError> {
        match spec.trim() {
            "trap" => Ok(BoundaryConfig::trap()),
            "base" | "" => Ok(BoundaryConfig::base()),
            list => BoundaryConfig::linked(Self::parse_flags(list)?),
        }
    }

    /// Canonical label: `trap`, `base`, or the sorted flag list.
    pub fn label(&self) -> String {
        if self.baseline == Baseline::Trap {
            return "trap".to_string();
        }
        let mut names = Vec::new();
        if self.flags.byp {
            names.push("byp");
        }
        if self.flags.nss {
            names.push("nss");
        }
        if self.flags.nss_ps {
            names.push("nss_ps");
        }
        if self.flags.pf_df {
            names.push("pf_df");
        }
        if self.flags.pf_ss {
            names.push("pf_ss");
        }
        if self.flags.ret {
            names.push("ret");
        }
        if names.is_empty() {
            "base".to_string()
        } else {
            names.join(",")
        }
    }

    /// Every valid configuration, in a fixed deterministic order.
    pub fn enumerate_valid() -> Vec<BoundaryConfig> {
        let mut out = vec![BoundaryConfig::trap()];
        let bools = [false, true];
        for byp in bools {
            for ret in bools {
                for (nss, nss_ps) in [(false, false), (true, false), (false, true)] {
                    for (pf_df, pf_ss) in [(false, false), (true, false), (false, true)] {
                        let flags = FlagSet {
                            byp,
                            nss,
                            nss_ps,
                            ret,
                            pf_df,
                            pf_ss,
                        };
                        if let Ok(cfg) = BoundaryConfig::linked(flags) {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn baseline(&self) -> Baseline {
        self.baseline
    }

    pub fn byp(&self) -> bool {
        self.flags.byp
    }

    pub fn nss(&self) -> bool {
        self.flags.nss
    }

    pub fn nss_ps(&self) -> bool {
        self.flags.nss_ps
    }

    pub fn ret(&self) -> bool {
        self.flags.ret
    }

    pub fn pf_df(&self) -> bool {
        self.flags.pf_df
    }

    pub fn pf_ss(&self) -> bool {
        self.flags.pf_ss
    }

    /// Whether transitions switch between user and kernel stacks.
    pub fn switches_stacks(&self) -> bool {
        !(self.flags.nss || self.flags.nss_ps)
    }

    pub fn is_trap(&self) -> bool {
        self.baseline == Baseline::Trap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ret_byp_is_valid() {
        let cfg = BoundaryConfig::linked(FlagSet {
            ret: true,
            byp: true,
            ..FlagSet::default()
        })
        .unwrap();
        assert_eq!(cfg.label(), "byp,ret");
    }

    #[test]
    fn plain_trap_is_valid() {
        let cfg = BoundaryConfig::trap();
        assert!(cfg.is_trap());
        assert_eq!(cfg.label(), "trap");
    }

    #[test]
    fn nss_and_nss_ps_conflict() {
        let err = BoundaryConfig::linked(FlagSet {
            nss: true,
            nss_ps: true,
            pf_df: true,
            ..FlagSet::default()
        })
        .unwrap_err();
        assert_eq!(err, ConfigError::ConflictingFlags("nss and nss_ps"));
    }

    #[test]
    fn pf_policies_conflict() {
        let err = BoundaryConfig::linked(FlagSet {
            pf_df: true,
            pf_ss: true,
            ..FlagSet::default()
        })
        .unwrap_err();
        assert_eq!(err, ConfigError::ConflictingFlags("pf_df and pf_ss"));
    }

    #[test]
    fn trap_rejects_flags() {
        let err = BoundaryConfig::new(
            Baseline::Trap,
            FlagSet {
                byp: true,
                ..FlagSet::default()
            },
        )
        .unwrap_err();
        assert_eq!(err, ConfigError::FlagsRequireLinked);
    }

    #[test]
    fn nss_requires_fault_policy() {
        let err = BoundaryConfig::linked(FlagSet {
            nss: true,
            ..FlagSet::default()
        })
        .unwrap_err();
        assert_eq!(err, ConfigError::MissingFaultPolicy);
    }

    #[test]
    fn parse_round_trips_labels() {
        for cfg in BoundaryConfig::enumerate_valid() {
            let reparsed = BoundaryConfig::parse(&cfg.label()).unwrap();
            assert_eq!(reparsed, cfg);
        }
    }

    #[test]
    fn valid_config_count_is_stable() {
        // trap + byp(2) x ret(2) x [no-stack-mode x 3 pf + 2 stack modes x 2 pf]
        assert_eq!(BoundaryConfig::enumerate_valid().len(), 29);
    }

    #[test]
    fn unknown_flag_rejected() {
        assert_eq!(
            BoundaryConfig::parse("ret,warp").unwrap_err(),
            ConfigError::UnknownFlag("warp".to_string())
        );
    }

    proptest! {
        /// Validity is decidable and total: every flag set maps to exactly
        /// one of a valid config or a specific error, and acceptance matches
        /// the documented rules.
        #[test]
        fn config_validity_total(
            trap in any::<bool>(),
            byp in any::<bool>(),
            nss in any::<bool>(),
            nss_ps in any::<bool>(),
            ret in any::<bool>(),
            pf_df in any::<bool>(),
            pf_ss in any::<bool>(),
        ) {
            let baseline = if trap { Baseline::Trap } else { Baseline::LinkedBase };
            let flags = FlagSet { byp, nss, nss_ps, ret, pf_df, pf_ss };
            let result = BoundaryConfig::new(baseline, flags);
            let any_flag = byp || nss || nss_ps || ret || pf_df || pf_ss;
            let expect_ok = !(nss && nss_ps)
                && !(pf_df && pf_ss)
                && !(trap && any_flag)
                && !((nss || nss_ps) && !(pf_df || pf_ss));
            prop_assert_eq!(result.is_ok(), expect_ok);
        }
    }
}
