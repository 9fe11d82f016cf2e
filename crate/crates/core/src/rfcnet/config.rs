use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ldcs::Merge;

pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_WIDTH: usize = 16;

/// Published kernel configurations: `m` and the `m` strong kernel sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// m=3, k=3,5,7
    A,
    /// m=3, k=3,3,3
    B,
    /// m=2, k=3,5
    C,
    /// m=2, k=3,3
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn kernels(self) -> &'static [usize] {
        match self {
            Preset::A => &[3, 5, 7],
            Preset::B => &[3, 3, 3],
            Preset::C => &[3, 5],
            Preset::D => &[3, 3],
        }
    }

    pub fn m(self) -> usize {
        self.kernels().len()
    }

    pub fn label(self) -> char {
        match self {
            Preset::A => 'a',
            Preset::B => 'b',
            Preset::C => 'c',
            Preset::D => 'd',
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Preset::A),
            "b" => Ok(Preset::B),
            "c" => Ok(Preset::C),
            "d" => Ok(Preset::D),
            other => Err(Error::arg(format!(
                "unknown preset {other:?} (expected a, b, c or d)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Whole-network description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfcConfig {
    /// Branching factor of the tree.
    pub m: usize,
    /// One strong kernel size per branch.
    pub kernels: Vec<usize>,
    /// Number of LDCS tree layers.
    pub depth: usize,
    /// Channels per tree group.
    pub width: usize,
    /// Output channels of the two stem convolutions.
    pub stem: (usize, usize),
    pub num_classes: usize,
    pub merge: Merge,
    pub include_bias: bool,
    pub seed: u64,
}

impl Default for RfcConfig {
    fn default() -> Self {
        RfcConfig::preset(Preset::A)
    }
}

impl RfcConfig {
    pub fn preset(p: Preset) -> Self {
        RfcConfig {
            m: p.m(),
            kernels: p.kernels().to_vec(),
            depth: DEFAULT_DEPTH,
            width: DEFAULT_WIDTH,
            stem: (DEFAULT_WIDTH, DEFAULT_WIDTH),
            num_classes: 2,
            merge: Merge::Concat,
            include_bias: true,
            seed: 0,
        }
    }

    /// Sets `width` and both stem widths together.
    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self.stem = (width, width);
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::arg(format!("invalid RfcConfig: {msg}")));
        if self.m < 2 {
            return fail(format!("branching factor m = {} must be >= 2", self.m));
        }
        if self.kernels.len() != self.m {
            return fail(format!(
                "{} kernel sizes given but m = {}",
                self.kernels.len(),
                self.m
            ));
        }
        if let Some(&k) = self.kernels.iter().find(|&&k| k < 3 || k % 2 == 0) {
            return fail(format!("kernel size {k} must be odd and >= 3"));
        }
        if self.depth < 1 {
            return fail("depth must be >= 1".into());
        }
        if self.width < 1 || self.stem.0 < 1 {
            return fail("widths must be positive".into());
        }
        if self.stem.1 != self.width {
            return fail(format!(
                "stem output width {} must equal group width {}",
                self.stem.1, self.width
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes = {} must be >= 2", self.num_classes));
        }
        if self
            .m
            .checked_pow(self.depth as u32)
            .and_then(|g| g.checked_mul(self.width))
            .is_none()
        {
            return fail("m^depth * width overflows".into());
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.m.pow(self.depth as u32)
    }

    pub fn leaf_channels(&self) -> usize {
        self.width * self.leaf_count()
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv_lines(&self) -> String {
        let kernels: Vec<String> = self.kernels.iter().map(usize::to_string).collect();
        format!(
            "m={}\nkernels={}\ndepth={}\nwidth={}\nstem={},{}\nnum_classes={}\nmerge={}\ninclude_bias={}\nseed={}\n",
            self.m,
            kernels.join(","),
            self.depth,
            self.width,
            self.stem.0,
            self.stem.1,
            self.num_classes,
            self.merge,
            self.include_bias,
            self.seed
        )
    }

    /// Parses the fields written by [`RfcConfig::to_kv_lines`] and validates.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Validation(format!("missing config key {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("config key {k:?} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Validation(format!("bad entry {s:?} in {k:?}")))
                })
                .collect()
        };
        let stem = list("stem")?;
        if stem.len() != 2 {
            return Err(Error::Validation("stem must list two widths".into()));
        }
        let cfg = RfcConfig {
            m: num("m")?,
            kernels: list("kernels")?,
            depth: num("depth")?,
            width: num("width")?,
            stem: (stem[0], stem[1]),
            num_classes: num("num_classes")?,
            merge: get("merge")?
                .parse()
                .map_err(|e: Error| Error::Validation(e.to_string()))?,
            include_bias: get("include_bias")?
                .parse()
                .map_err(|_| Error::Validation("include_bias must be true or false".into()))?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Validation("seed must be an integer".into()))?,
        };
        cfg.validate()
            .map_err(|e| Error::Validation(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(RfcConfig::preset(Preset::A).kernels, vec![3, 5, 7]);
        assert_eq!(RfcConfig::preset(Preset::B).m, 3);
        assert_eq!(RfcConfig::preset(Preset::C).kernels, vec![3, 5]);
        assert_eq!(RfcConfig::preset(Preset::D).kernels, vec![3, 3]);
        for p in Preset::ALL {
            RfcConfig::preset(p).validate().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn validation_names_the_failure() {
        let bad = RfcConfig {
            kernels: vec![3, 5],
            ..RfcConfig::preset(Preset::A)
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("m = 3"), "{msg}");
        let bad = RfcConfig {
            kernels: vec![3, 4],
            ..RfcConfig::preset(Preset::D)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("odd"));
        let bad = RfcConfig {
            stem: (8, 8),
            ..RfcConfig::preset(Preset::D)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("stem"));
        let bad = RfcConfig {
            m: 1,
            kernels: vec![3],
            ..RfcConfig::preset(Preset::D)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = RfcConfig {
            seed: 42,
            merge: Merge::Add,
            ..RfcConfig::preset(Preset::C).with_width(8)
        };
        let map: BTreeMap<String, String> = cfg
            .to_kv_lines()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(RfcConfig::from_kv(&map).unwrap(), cfg);
    }
}
