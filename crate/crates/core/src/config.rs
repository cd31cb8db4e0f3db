//! Experiment configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! mode = interconnected
//! kde.h = 0.04
//! target.components = 0.3 0.3 0.012 0 0.012 0.5; 0.7 0.65 0.015 0.004 0.01 0.5
//! ```
//!
//! Later assignments override earlier ones, so overrides can simply be
//! appended to the text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::control::{GaussianComponent, TargetSpec};
use crate::error::{Error, Result};
use crate::filters::{FilterSettings, RiccatiScheme};
use crate::grid::{Grid, Rect};
use crate::pde::{Flux, CFL_SAFETY};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Agents, KDE, both filters and the estimate-based law.
    Interconnected,
    /// Reference PDE under the exact-density law; no agents or filters.
    PerfectFeedback,
    /// Filters fed with the exact density and gradient while the PDE runs
    /// under the exact-density law.
    FilterOnly,
    IssSweep,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interconnected" => Ok(Mode::Interconnected),
            "perfect_feedback" => Ok(Mode::PerfectFeedback),
            "filter_only" => Ok(Mode::FilterOnly),
            "iss_sweep" => Ok(Mode::IssSweep),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Interconnected => "interconnected",
            Mode::PerfectFeedback => "perfect_feedback",
            Mode::FilterOnly => "filter_only",
            Mode::IssSweep => "iss_sweep",
        }
    }
}

/// Where the filters start in `filter_only` mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterInit {
    Kde,
    Truth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub nx: usize,
    pub ny: usize,
    pub domain: Rect,
    pub n_agents: usize,
    pub init_region: Rect,
    pub dt: f64,
    pub t_end: f64,
    pub sigma: f64,
    pub flux: Flux,
    pub alpha: f64,
    pub v_max: Option<f64>,
    pub kde_h: f64,
    pub floor_eps: f64,
    pub filter: FilterSettings,
    pub filter_init: FilterInit,
    pub target: TargetSpec,
    pub p_min: f64,
    pub output_dir: Option<PathBuf>,
    /// Steps between snapshots; 0 disables them.
    pub snapshot_every: usize,
    pub pgm: bool,
    pub dump_agents: bool,
    pub iss_deltas: Vec<f64>,
    source: String,
}

pub fn default_mixture() -> TargetSpec {
    TargetSpec::GaussianMixture(vec![
        GaussianComponent { mean: [0.3, 0.3], cov: [0.012, 0.0, 0.012], weight: 0.5 },
        GaussianComponent { mean: [0.7, 0.65], cov: [0.015, 0.004, 0.01], weight: 0.5 },
    ])
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Interconnected,
            seed: 1,
            nx: 30,
            ny: 30,
            domain: Rect::unit(),
            n_agents: 1024,
            init_region: Rect::new(0.15, 0.85, 0.15, 0.85).expect("valid"),
            dt: 0.01,
            t_end: 100.0,
            // √(2σ) = 0.01
            sigma: 0.5e-4,
            flux: Flux::Upwind,
            alpha: 0.003,
            v_max: None,
            kde_h: 0.04,
            floor_eps: 1e-6,
            filter: FilterSettings {
                q_proc: 1e-8,
                scheme: RiccatiScheme::Split,
                riccati_every: 50,
            },
            filter_init: FilterInit::Kde,
            target: default_mixture(),
            p_min: 0.2,
            output_dir: None,
            snapshot_every: 0,
            pgm: false,
            dump_agents: false,
            iss_deltas: vec![0.0, 0.01, 0.05, 0.1],
            source: String::new(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_num(key, t))
        .collect()
}

fn parse_fixed<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("`{key}` needs {N} numbers, got {}", v.len())))
}

fn parse_rect(key: &str, value: &str) -> Result<Rect> {
    let [a, b, c, d] = parse_fixed::<4>(key, value)?;
    Rect::new(a, b, c, d).map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_components(key: &str, value: &str) -> Result<Vec<GaussianComponent>> {
    value
        .split(';')
        .filter(|part| !part.trim().is_empty())
        .map(|part| {
            let [mx, my, sxx, sxy, syy, w] = parse_fixed::<6>(key, part)?;
            Ok(GaussianComponent { mean: [mx, my], cov: [sxx, sxy, syy], weight: w })
        })
        .collect()
}

#[derive(Default)]
struct TargetKeys {
    kind: Option<String>,
    components: Option<Vec<GaussianComponent>>,
    center: Option<[f64; 2]>,
    radius: Option<f64>,
    width: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut target = TargetKeys::default();
        let mut noise_std = None;
        let mut noise_sigma = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "mode" => cfg.mode = value.parse()?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "grid.nx" => cfg.nx = parse_num(key, value)?,
                "grid.ny" => cfg.ny = parse_num(key, value)?,
                "grid.domain" => cfg.domain = parse_rect(key, value)?,
                "agents.n" => cfg.n_agents = parse_num(key, value)?,
                "agents.init" => cfg.init_region = parse_rect(key, value)?,
                "time.dt" => cfg.dt = parse_num(key, value)?,
                "time.t_end" => cfg.t_end = parse_num(key, value)?,
                "noise.std" => {
                    noise_std = Some(parse_num::<f64>(key, value)?);
                    noise_sigma = None;
                }
                "noise.sigma" => {
                    noise_sigma = Some(parse_num::<f64>(key, value)?);
                    noise_std = None;
                }
                "pde.flux" => cfg.flux = value.parse()?,
                "control.alpha" => cfg.alpha = parse_num(key, value)?,
                "control.v_max" => {
                    cfg.v_max = match value {
                        "none" | "off" => None,
                        v => Some(parse_num(key, v)?),
                    }
                }
                "kde.h" => cfg.kde_h = parse_num(key, value)?,
                "kde.floor_eps" => cfg.floor_eps = parse_num(key, value)?,
                "kde.q_proc" => cfg.filter.q_proc = parse_num(key, value)?,
                "filter.riccati_every" => cfg.filter.riccati_every = parse_num(key, value)?,
                "filter.scheme" => {
                    cfg.filter.scheme = match value {
                        "split" => RiccatiScheme::Split,
                        "euler" => RiccatiScheme::Euler,
                        v => return Err(Error::Config(format!("`{key}`: unknown scheme `{v}`"))),
                    }
                }
                "filter.init" => {
                    cfg.filter_init = match value {
                        "kde" => FilterInit::Kde,
                        "truth" => FilterInit::Truth,
                        v => return Err(Error::Config(format!("`{key}`: expected kde or truth, got `{v}`"))),
                    }
                }
                "target.kind" => target.kind = Some(value.to_string()),
                "target.p_min" => cfg.p_min = parse_num(key, value)?,
                "target.components" => target.components = Some(parse_components(key, value)?),
                "target.center" => target.center = Some(parse_fixed::<2>(key, value)?),
                "target.radius" => target.radius = Some(parse_num(key, value)?),
                "target.width" => target.width = Some(parse_num(key, value)?),
                "output.dir" => cfg.output_dir = Some(PathBuf::from(value)),
                "output.snapshot_every" => cfg.snapshot_every = parse_num(key, value)?,
                "output.pgm" => cfg.pgm = parse_bool(key, value)?,
                "output.agents" => cfg.dump_agents = parse_bool(key, value)?,
                "iss.deltas" => cfg.iss_deltas = parse_list(key, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        if let Some(std) = noise_std {
            cfg.sigma = std * std / 2.0;
        }
        if let Some(sigma) = noise_sigma {
            cfg.sigma = sigma;
        }
        cfg.target = match target.kind.as_deref() {
            None | Some("mixture") => match target.components {
                Some(parts) => TargetSpec::GaussianMixture(parts),
                None => default_mixture(),
            },
            Some("uniform") => TargetSpec::Uniform,
            Some("ring") => TargetSpec::Ring {
                center: target.center.unwrap_or([0.5, 0.5]),
                radius: target.radius.unwrap_or(0.3),
                width: target.width.unwrap_or(0.06),
            },
            Some(other) => return Err(Error::Config(format!("unknown target kind `{other}`"))),
        };
        cfg.source = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Re-parses with `key = value` appended.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut text = self.echo();
        let _ = writeln!(text, "{key} = {value}");
        Self::parse(&text)
    }

    /// Source text the configuration was parsed from; empty for defaults.
    pub fn echo(&self) -> String {
        let mut text = self.source.clone();
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.nx, self.ny, self.domain)
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.nx < 2 || self.ny < 2 {
            return bad("grid needs at least 2 cells per axis");
        }
        for (name, v) in [
            ("time.dt", self.dt),
            ("time.t_end", self.t_end),
            ("kde.h", self.kde_h),
            ("kde.floor_eps", self.floor_eps),
            ("target.p_min", self.p_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("`{name}` must be positive, got {v}"));
            }
        }
        for (name, v) in [("noise", self.sigma), ("control.alpha", self.alpha), ("kde.q_proc", self.filter.q_proc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("`{name}` must be nonnegative, got {v}"));
            }
        }
        if self.n_agents == 0 {
            return bad("`agents.n` must be positive");
        }
        if self.filter.riccati_every == 0 {
            return bad("`filter.riccati_every` must be at least 1");
        }
        if self.mode != Mode::PerfectFeedback && self.mode != Mode::IssSweep && self.sigma == 0.0 {
            return bad("filters need a strictly positive noise level");
        }
        if !self.init_region.is_within(&self.domain) {
            return bad("`agents.init` must lie inside `grid.domain`");
        }
        if self.steps() == 0 {
            return bad("`time.t_end` is shorter than one step");
        }
        if self.iss_deltas.iter().any(|d| !(*d >= 0.0)) || self.iss_deltas.windows(2).any(|w| w[1] < w[0]) {
            return bad("`iss.deltas` must be nonnegative and ascending");
        }
        let grid = self.grid()?;
        let target = crate::control::make_target(&self.target, &grid, self.p_min)
            .map_err(|e| Error::Config(format!("target: {e}")))?;
        let speed = target.equilibrium_velocity(self.sigma).max_magnitude();
        let h = grid.min_spacing();
        let limit = CFL_SAFETY * h * h / (4.0 * self.sigma + speed * h);
        if self.dt > limit {
            return bad(&format!("`time.dt` = {} exceeds the stability bound {limit:.3e}", self.dt));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_setup() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!((c.nx, c.ny, c.n_agents), (30, 30, 1024));
        assert_eq!(c.dt, 0.01);
        assert!((2.0 * c.sigma).sqrt() - 0.01 < 1e-15);
        assert_eq!(c.alpha, 0.003);
        assert_eq!(c.kde_h, 0.04);
        assert_eq!(c.init_region, Rect::new(0.15, 0.85, 0.15, 0.85).unwrap());
        assert_eq!(c.mode, Mode::Interconnected);
        assert_eq!(c.steps(), 10_000);
    }

    #[test]
    fn parses_every_section() {
        let text = "\
# a comment
mode = filter_only
seed = 7
grid.nx = 12   # trailing comment
grid.ny = 10
grid.domain = 0, 2, 0, 1
agents.n = 50
agents.init = 0.5 1.5 0.2 0.8
time.dt = 0.005
time.t_end = 1
noise.sigma = 0.001
control.alpha = 0.01
control.v_max = 0.5
kde.h = 0.1
kde.floor_eps = 1e-7
kde.q_proc = 0
filter.riccati_every = 4
filter.scheme = euler
filter.init = truth
target.kind = ring
target.center = 1.0 0.5
target.radius = 0.3
target.width = 0.1
target.p_min = 0.1
output.dir = /tmp/out
output.snapshot_every = 10
output.pgm = true
output.agents = yes
iss.deltas = 0, 0.5
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.mode, Mode::FilterOnly);
        assert_eq!(c.seed, 7);
        assert_eq!((c.nx, c.ny), (12, 10));
        assert_eq!(c.domain.width(), 2.0);
        assert_eq!(c.sigma, 0.001);
        assert_eq!(c.v_max, Some(0.5));
        assert_eq!(c.filter.scheme, RiccatiScheme::Euler);
        assert_eq!(c.filter.riccati_every, 4);
        assert_eq!(c.filter_init, FilterInit::Truth);
        assert_eq!(c.target, TargetSpec::Ring { center: [1.0, 0.5], radius: 0.3, width: 0.1 });
        assert_eq!(c.output_dir, Some(PathBuf::from("/tmp/out")));
        assert!(c.pgm && c.dump_agents);
        assert_eq!(c.iss_deltas, vec![0.0, 0.5]);
        assert_eq!(c.echo(), text);
    }

    #[test]
    fn noise_std_maps_to_sigma_and_later_keys_win() {
        let c = ExperimentConfig::parse("noise.std = 0.02\nseed = 3\nseed = 4").unwrap();
        assert!((c.sigma - 2e-4).abs() < 1e-18);
        assert_eq!(c.seed, 4);
        let d = c.with_override("seed", "9").unwrap();
        assert_eq!(d.seed, 9);
        assert!((d.sigma - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn mixture_components_parse() {
        let c = ExperimentConfig::parse("target.components = 0.5 0.5 0.01 0 0.02 1; 0.2 0.2 0.01 0 0.01 2;").unwrap();
        match c.target {
            TargetSpec::GaussianMixture(parts) => {
                assert_eq!(parts.len(), 2);
                assert_eq!(parts[1].weight, 2.0);
                assert_eq!(parts[0].cov, [0.01, 0.0, 0.02]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "nonsense",
            "unknown.key = 1",
            "grid.nx = ten",
            "mode = sideways",
            "time.dt = -1",
            "time.dt = 10",
            "agents.init = 0.5 1.5 0 1",
            "agents.n = 0",
            "iss.deltas = 0.1 0.01",
            "target.kind = blob",
            "target.components = 1 2 3",
            "output.pgm = maybe",
            "filter.riccati_every = 0",
            "target.p_min = 1.5",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let missing = ExperimentConfig::from_file(Path::new("/definitely/not/here.cfg"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }
}
