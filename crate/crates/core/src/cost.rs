//! Latency constants and the closed-form cost expressions used by the
//! scheduler.
//!
//! Time is measured in integer ticks (one tick = one microsecond). Real-valued
//! intermediate results are rounded half-up to ticks where they leave this
//! module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Ticks = u64;

/// Name of the tick unit written to calibration and timeline files.
pub const TICK_UNIT: &str = "us";

pub fn round_half_up(x: f64) -> Ticks {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as Ticks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Transfer time of one expert over the host link.
    pub t_io: Ticks,
    /// GPU compute time of one expert.
    pub t_g: Ticks,
    /// Attention time per layer.
    pub t_attn: Ticks,
    /// CPU cost per token.
    pub beta: f64,
    /// CPU startup cost per expert.
    pub startup: f64,
    /// Current I/O backlog delaying a new on-demand transfer.
    #[serde(default)]
    pub alpha: Ticks,
}

impl CostParams {
    pub fn new(t_io: Ticks, t_g: Ticks, t_attn: Ticks, beta: f64, startup: f64) -> Result<Self> {
        let p = CostParams {
            t_io,
            t_g,
            t_attn,
            beta,
            startup,
            alpha: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite() && self.startup >= 0.0 && self.startup.is_finite()) {
            return Err(Error::InvalidConfig("beta and startup must be finite and >= 0".into()));
        }
        if self.t_g >= self.t_io {
            return Err(Error::InvalidConfig(format!(
                "t_g ({}) must be strictly below t_io ({}) for transfers to mask GPU compute",
                self.t_g, self.t_io
            )));
        }
        Ok(())
    }

    pub fn with_alpha(mut self, alpha: Ticks) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Where an activated expert's weights currently are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Resident,
    InFlight,
    Host,
}

/// One schedulable expert with its pending token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub expert: usize,
    pub layer: usize,
    pub tokens: u32,
    pub location: Location,
}

impl ExpertLoad {
    pub fn host(layer: usize, expert: usize, tokens: u32) -> Self {
        ExpertLoad {
            expert,
            layer,
            tokens,
            location: Location::Host,
        }
    }
}

/// Ascending by token count, ties by lower expert index.
pub fn sort_loads(loads: &mut [ExpertLoad]) {
    loads.sort_by(|a, b| a.tokens.cmp(&b.tokens).then(a.expert.cmp(&b.expert)));
}

/// Hit and miss rates of the critical (last issued) prefetch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitStats {
    pub r_hit: f64,
    pub r_miss: f64,
    /// Critical prefetches observed so far.
    pub window: u32,
}

impl HitStats {
    pub fn new(r_hit: f64) -> Self {
        let r_hit = r_hit.clamp(0.0, 1.0);
        HitStats {
            r_hit,
            r_miss: 1.0 - r_hit,
            window: 0,
        }
    }

    /// Exponentially weighted update with smoothing span `span`.
    pub fn observe(&mut self, hit: bool, span: u32) {
        let w = 1.0 / f64::from(span.max(1));
        let x = if hit { 1.0 } else { 0.0 };
        self.r_hit += w * (x - self.r_hit);
        self.r_hit = self.r_hit.clamp(0.0, 1.0);
        self.r_miss = 1.0 - self.r_hit;
        self.window = self.window.saturating_add(1);
    }
}

impl Default for HitStats {
    fn default() -> Self {
        HitStats::new(1.0)
    }
}

/// CPU cost of one expert with `tokens` tokens: `beta * m + C`.
pub fn cpu_cost(tokens: u32, params: &CostParams) -> Ticks {
    round_half_up(params.beta * f64::from(tokens) + params.startup)
}

/// Sum of per-expert CPU costs.
pub fn cpu_cost_list(loads: &[ExpertLoad], params: &CostParams) -> Ticks {
    loads.iter().map(|l| cpu_cost(l.tokens, params)).sum()
}

/// Result of a least-squares fit of CPU cost against token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    pub beta: f64,
    pub startup: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ticks = beta * tokens + startup`.
pub fn fit_cost_params(samples: &[(u32, f64)]) -> Result<CostFit> {
    let distinct = {
        let mut m: Vec<u32> = samples.iter().map(|s| s.0).collect();
        m.sort_unstable();
        m.dedup();
        m.len()
    };
    if distinct < 2 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 2 distinct token counts, got {distinct}"
        )));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| f64::from(s.0)).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in samples {
        let dx = f64::from(x) - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let beta = sxy / sxx;
    let startup = mean_y - beta * mean_x;
    let ss_res: f64 = samples
        .iter()
        .map(|&(x, y)| {
            let r = y - (beta * f64::from(x) + startup);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(CostFit {
        beta,
        startup,
        r_squared,
    })
}

/// Cross-layer costs at position `i` of the merged list `all`:
/// `T_G_all = alpha + (len - i) * t_io + t_g` (loading `all[i..]`) and
/// `T_C_all = t_c(all[0..=i]) + t_attn`.
pub fn cross_layer_costs(i: usize, all: &[ExpertLoad], params: &CostParams) -> Result<(Ticks, Ticks)> {
    if i >= all.len() {
        return Err(Error::IndexOutOfRange { index: i, len: all.len() });
    }
    let loads = (all.len() - i) as Ticks;
    let t_g_all = params.alpha + loads * params.t_io + params.t_g;
    let t_c_all = cpu_cost_list(&all[..=i], params) + params.t_attn;
    Ok((t_g_all, t_c_all))
}

/// Current-layer costs for split `i_prime`: `T_G = alpha + (len - i') * t_io
/// + t_g` (loading `cur[i'..]`) and `T_C = t_c(cur[0..i'])`.
pub fn current_layer_costs(i_prime: usize, cur: &[ExpertLoad], params: &CostParams) -> Result<(Ticks, Ticks)> {
    if i_prime > cur.len() {
        return Err(Error::IndexOutOfRange {
            index: i_prime,
            len: cur.len(),
        });
    }
    let loads = (cur.len() - i_prime) as Ticks;
    let t_g = params.alpha + loads * params.t_io + params.t_g;
    let t_c = cpu_cost_list(&cur[..i_prime], params);
    Ok((t_g, t_c))
}

/// Overlappable prefetch count `f = (T_gap + t_attn) / t_io`, and its
/// half-up rounding (negative values count as zero).
pub fn overlap_prefetch_count(t_gap: i64, params: &CostParams) -> (f64, usize) {
    let f = (t_gap as f64 + params.t_attn as f64) / params.t_io as f64;
    (f, round_half_up(f.max(0.0)) as usize)
}

/// Net benefit of issuing the critical prefetch, in (unrounded) ticks:
/// `R_hit * (f - |f| + 1) * t_e - R_miss * (|f| - f) * t_e`, with the
/// per-expert transfer time standing in for `t_e`.
pub fn prefetch_gain(stats: &HitStats, f: f64, f_int: usize, params: &CostParams) -> f64 {
    let t_e = params.t_io as f64;
    let fi = f_int as f64;
    stats.r_hit * (f - fi + 1.0) * t_e - stats.r_miss * (fi - f) * t_e
}

/// On-disk calibration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub t_io: Ticks,
    pub t_g: Ticks,
    pub t_attn: Ticks,
    pub beta: f64,
    pub startup: f64,
    pub tick_unit: String,
}

impl Calibration {
    pub fn from_params(p: &CostParams) -> Self {
        Calibration {
            t_io: p.t_io,
            t_g: p.t_g,
            t_attn: p.t_attn,
            beta: p.beta,
            startup: p.startup,
            tick_unit: TICK_UNIT.to_string(),
        }
    }

    pub fn params(&self) -> Result<CostParams> {
        if self.tick_unit != TICK_UNIT {
            return Err(Error::InvalidConfig(format!(
                "calibration tick unit `{}` is not `{TICK_UNIT}`",
                self.tick_unit
            )));
        }
        CostParams::new(self.t_io, self.t_g, self.t_attn, self.beta, self.startup)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        crate::util::write_atomic(path, text.as_bytes())
    }
}

/// Reads `tokens,ticks` rows (header optional).
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<(u32, f64)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let (Some(m), Some(t)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::format(path, format!("row {} needs two columns", i + 1)));
        };
        match (m.parse::<u32>(), t.parse::<f64>()) {
            (Ok(m), Ok(t)) => out.push((m, t)),
            _ if i == 0 => continue,
            _ => return Err(Error::format(path, format!("row {} is not numeric", i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(t_io: Ticks, t_g: Ticks, t_attn: Ticks, beta: f64, c: f64) -> CostParams {
        CostParams::new(t_io, t_g, t_attn, beta, c).unwrap()
    }

    fn loads(tokens: &[u32]) -> Vec<ExpertLoad> {
        tokens.iter().enumerate().map(|(e, &m)| ExpertLoad::host(0, e, m)).collect()
    }

    #[test]
    fn construction_enforces_masking_premise() {
        assert!(CostParams::new(10, 10, 0, 1.0, 0.0).is_err());
        assert!(CostParams::new(10, 11, 0, 1.0, 0.0).is_err());
        assert!(CostParams::new(10, 9, 0, -1.0, 0.0).is_err());
        assert!(CostParams::new(10, 9, 0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn cpu_cost_examples() {
        let p = params(4000, 100, 0, 50.0, 2000.0);
        assert_eq!(cpu_cost(0, &p), 2000);
        assert_eq!(cpu_cost(40, &p), 4000);
        let l = loads(&[1, 2, 3]);
        assert_eq!(cpu_cost_list(&l, &p), 2050 + 2100 + 2150);
        assert_eq!(cpu_cost_list(&[], &p), 0);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(1.5), 2);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(round_half_up(-3.0), 0);
        let p = params(4000, 100, 0, 0.5, 0.0);
        assert_eq!(cpu_cost(3, &p), 2);
    }

    #[test]
    fn fit_examples() {
        let exact: Vec<(u32, f64)> = (1..=10).map(|m| (m, 50.0 * f64::from(m) + 2000.0)).collect();
        let fit = fit_cost_params(&exact).unwrap();
        assert!((fit.beta - 50.0).abs() < 1e-9);
        assert!((fit.startup - 2000.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let two = fit_cost_params(&[(1, 100.0), (2, 150.0)]).unwrap();
        assert!((two.beta - 50.0).abs() < 1e-12);
        assert!((two.startup - 50.0).abs() < 1e-12);

        assert!(matches!(
            fit_cost_params(&[(3, 1.0), (3, 2.0), (3, 4.0)]),
            Err(Error::DegenerateSamples(_))
        ));
        assert!(fit_cost_params(&[]).is_err());
    }

    #[test]
    fn cross_layer_single_expert() {
        let p = params(10, 2, 3, 1.0, 5.0);
        let all = loads(&[100]);
        assert_eq!(cross_layer_costs(0, &all, &p).unwrap(), (12, 108));
        let shifted = p.with_alpha(6);
        assert_eq!(cross_layer_costs(0, &all, &shifted).unwrap(), (18, 108));
        assert!(matches!(
            cross_layer_costs(1, &all, &p),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn current_layer_edge_indices() {
        let p = params(10, 2, 3, 1.0, 5.0).with_alpha(4);
        let cur = loads(&[1, 2, 3]);
        let n = cur.len() - 1;
        assert_eq!(current_layer_costs(n, &cur, &p).unwrap().0, 4 + 10 + 2);
        assert_eq!(current_layer_costs(0, &cur, &p).unwrap().1, 0);
        assert!(current_layer_costs(4, &cur, &p).is_err());
    }

    #[test]
    fn overlap_count_examples() {
        let p = params(4000, 100, 3000, 1.0, 0.0);
        assert_eq!(overlap_prefetch_count(5000, &p), (2.0, 2));
        assert_eq!(overlap_prefetch_count(-3000, &p), (0.0, 0));
        let (f, fi) = overlap_prefetch_count(3000, &p);
        assert_eq!(f, 1.5);
        assert_eq!(fi, 2);
        assert_eq!(overlap_prefetch_count(-10_000, &p).1, 0);
    }

    #[test]
    fn gain_examples() {
        let p = params(4000, 100, 0, 1.0, 0.0);
        let sure = HitStats::new(1.0);
        for &(f, fi) in &[(1.6, 2usize), (2.4, 2), (0.2, 0), (3.0, 3)] {
            assert!(prefetch_gain(&sure, f, fi, &p) > 0.0);
        }
        let s = HitStats::new(0.9);
        let xi = prefetch_gain(&s, 1.6, 2, &p);
        assert!((xi - 2000.0).abs() < 1e-9, "{xi}");
        let weak = HitStats::new(0.05);
        assert!((prefetch_gain(&weak, 2.0, 2, &p) - 0.05 * 4000.0).abs() < 1e-9);
    }

    #[test]
    fn hit_stats_track_observations() {
        let mut s = HitStats::new(0.5);
        for _ in 0..200 {
            s.observe(true, 32);
        }
        assert!(s.r_hit > 0.99);
        assert!((s.r_hit + s.r_miss - 1.0).abs() < 1e-12);
        assert_eq!(s.window, 200);
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(4000, 100, 3000, 50.0, 2000.0);
        let c = Calibration::from_params(&p);
        let path = dir.path().join("cal.json");
        c.save(&path).unwrap();
        assert_eq!(Calibration::load(&path).unwrap().params().unwrap(), p);
    }

    #[test]
    fn samples_csv_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "tokens,ticks\n1,100\n2,150\n").unwrap();
        assert_eq!(read_samples_csv(&a).unwrap(), vec![(1, 100.0), (2, 150.0)]);
        let b = dir.path().join("b.csv");
        std::fs::write(&b, "1,100\n2, 150.5\n").unwrap();
        assert_eq!(read_samples_csv(&b).unwrap(), vec![(1, 100.0), (2, 150.5)]);
        let bad = dir.path().join("c.csv");
        std::fs::write(&bad, "1,100\nx,y\n").unwrap();
        assert!(read_samples_csv(&bad).is_err());
    }
}
