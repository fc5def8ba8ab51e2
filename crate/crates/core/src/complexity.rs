//! Computational cost engine: closed-form MAC polynomials for the
//! attention variants, an analytic per-layer walk of a model
//! configuration, and comparison against counts measured by the
//! instrumented forward.
//!
//! Counting convention (shared by formulas and instrumentation): one MAC
//! per multiply inside a matmul/conv contraction at nominal size; biases,
//! softmax, norms, activations, and elementwise gates count zero. Window
//! attention on a grid that needs padding is charged at the padded
//! resolution, which is what actually executes.

use crate::backbone::{effective_plan, BlockKind, ModelConfig, COORD_FFN_RATIO, MBCONV_EXPAND};
use crate::coordinator::{GENERATOR_HIDDEN_FACTOR, SA_KERNEL, SE_REDUCTION};
use crate::error::{Error, Result};
use crate::ops::conv_out_extent;

/// Attention flavor priced by [`closed_form`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Msa,
    Wsa,
    Ggca,
    Gcwa,
    Coca,
}

impl AttnKind {
    pub fn name(self) -> &'static str {
        match self {
            AttnKind::Msa => "MSA",
            AttnKind::Wsa => "WSA",
            AttnKind::Ggca => "GGCA",
            AttnKind::Gcwa => "GCWA",
            AttnKind::Coca => "CoCA",
        }
    }
}

/// Geometry one attention op is priced at. `m_side` is the window side;
/// the per-window token count is `T = m_side²`. `k` is the coordinator
/// count (ignored by MSA/WSA).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostParams {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m_side: usize,
    pub k: usize,
}

impl CostParams {
    pub fn tokens_per_window(&self) -> usize {
        self.m_side * self.m_side
    }

    fn validate(&self, kind: AttnKind) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::config(format!("cost params must be positive: {self:?}")));
        }
        let windowed = matches!(kind, AttnKind::Wsa | AttnKind::Gcwa | AttnKind::Coca);
        if windowed && (self.m_side == 0 || self.h % self.m_side != 0 || self.w % self.m_side != 0)
        {
            return Err(Error::config(format!(
                "{}: {}x{} not divisible into {}-sided windows",
                kind.name(),
                self.h,
                self.w,
                self.m_side
            )));
        }
        Ok(())
    }
}

/// Closed-form MAC count of one attention op over one sample.
///
/// With `hw` the patch count, `T` the per-window token count, `C` the
/// channel width and `K` the coordinator count:
///
/// * MSA:  `4hwC² + 2(hw)²C`
/// * WSA:  `4hwC² + 2·T·hw·C`
/// * GGCA: `4KC² + 2hwC² + 2K(K + hw)C`
/// * GCWA: `4hwC² + 2KC² + 2·T·hw·C + 2K·hw·C`
/// * CoCA: GGCA + GCWA, which expands to
///   `6(K + hw)C² + (2K² + 2·T·hw + 4K·hw)C`
pub fn closed_form(kind: AttnKind, p: &CostParams) -> Result<u64> {
    p.validate(kind)?;
    let hw = (p.h * p.w) as u64;
    let c = p.c as u64;
    let t = p.tokens_per_window() as u64;
    let k = p.k as u64;
    Ok(match kind {
        AttnKind::Msa => 4 * hw * c * c + 2 * hw * hw * c,
        AttnKind::Wsa => 4 * hw * c * c + 2 * t * hw * c,
        AttnKind::Ggca => 4 * k * c * c + 2 * hw * c * c + 2 * k * (k + hw) * c,
        AttnKind::Gcwa => 4 * hw * c * c + 2 * k * c * c + 2 * t * hw * c + 2 * k * hw * c,
        AttnKind::Coca => {
            closed_form(AttnKind::Ggca, p)? + closed_form(AttnKind::Gcwa, p)?
        }
    })
}

/// Run `f` under the MAC counter and return its result with the count.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    crate::macs::scoped(f)
}

// ---- analytic model walk ------------------------------------------------

/// One priced layer of a model configuration.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub k: usize,
    pub macs: u64,
}

fn row(name: String, kind: &str, (h, w): (usize, usize), c: usize, t: usize, k: usize, macs: u64) -> LayerCost {
    LayerCost {
        name,
        kind: kind.to_string(),
        h,
        w,
        c,
        t,
        k,
        macs,
    }
}

fn pad_to(side: usize, m: usize) -> usize {
    side.div_ceil(m) * m
}

/// Per-layer MAC rows of one forward pass at batch 1, priced analytically
/// from the configuration. Row names match the instrumented forward
/// exactly, so the two can be joined line by line.
pub fn model_cost_rows(config: &ModelConfig) -> Result<Vec<LayerCost>> {
    config.validate()?;
    let plan = effective_plan(config)?;
    let dims = config.dims();
    let img = config.image_size;
    let k = if config.no_coordinators {
        0
    } else {
        config.coordinators
    };
    let mut rows = Vec::new();

    // stem
    let h2 = conv_out_extent(img, 3, 2, 1).unwrap();
    let h4 = conv_out_extent(h2, 3, 2, 1).unwrap();
    let c1 = config.conv_dim as u64;
    rows.push(row(
        "stem.conv1".into(),
        "conv",
        (h2, h2),
        config.conv_dim,
        0,
        0,
        (h2 * h2) as u64 * c1 * 3 * 9,
    ));
    rows.push(row(
        "stem.conv2".into(),
        "conv",
        (h4, h4),
        config.conv_dim,
        0,
        0,
        (h4 * h4) as u64 * c1 * c1 * 9,
    ));

    // stage 1 MBConv blocks
    let hw1 = (h4 * h4) as u64;
    let e = (MBCONV_EXPAND * config.conv_dim) as u64;
    let mbconv = hw1 * c1 * e        // expand 1x1
        + hw1 * e * 9                // depthwise 3x3
        + 2 * e * (e / SE_REDUCTION as u64) // SE bottleneck
        + hw1 * e * c1; // project 1x1
    for i in 0..config.depths[0] {
        rows.push(row(
            format!("stage1.block{i}"),
            "mbconv",
            (h4, h4),
            config.conv_dim,
            0,
            0,
            mbconv,
        ));
    }

    // downsample into stage 2
    let g2 = config.grid_side(0);
    rows.push(row(
        "downsample1".into(),
        "conv",
        (g2, g2),
        dims[1],
        0,
        0,
        (g2 * g2) as u64 * dims[0] as u64 * dims[1] as u64 * 9,
    ));

    // generator
    if k > 0 {
        let c = dims[1] as u64;
        let hw = (g2 * g2) as u64;
        let se = 2 * c * (c / SE_REDUCTION as u64);
        let sa = hw * 2 * (SA_KERNEL * SA_KERNEL) as u64;
        let hidden = GENERATOR_HIDDEN_FACTOR as u64 * c;
        let mlp = c * hidden + hidden * (k as u64 * c);
        rows.push(row(
            "generator".into(),
            "generator",
            (g2, g2),
            dims[1],
            0,
            k,
            se + sa + mlp,
        ));
    }

    // transformer stages
    for s in 0..3 {
        let c = dims[s + 1];
        let grid = config.grid_side(s);
        let m = config.window[s];
        let padded = pad_to(grid, m);
        let ratio = config.mlp_ratio[s] as u64;
        let hw = (grid * grid) as u64;
        let cu = c as u64;
        let glu = hw * cu * (ratio * cu) + hw * (ratio * cu / 2) * 9 + hw * (ratio * cu / 2) * cu;
        let wsa_params = CostParams {
            h: padded,
            w: padded,
            c,
            m_side: m,
            k: 0,
        };
        let gcwa_params = CostParams {
            h: padded,
            w: padded,
            c,
            m_side: m,
            k,
        };
        let ggca_params = CostParams {
            h: grid,
            w: grid,
            c,
            m_side: m,
            k,
        };
        for (i, kind) in plan[s].iter().enumerate() {
            let name = format!("stage{}.block{i}", s + 2);
            match kind {
                BlockKind::Wsa => {
                    rows.push(row(
                        format!("{name}.attn"),
                        "wsa",
                        (padded, padded),
                        c,
                        m * m,
                        0,
                        closed_form(AttnKind::Wsa, &wsa_params)?,
                    ));
                }
                BlockKind::Coca => {
                    rows.push(row(
                        format!("{name}.ggca"),
                        "ggca",
                        (grid, grid),
                        c,
                        0,
                        k,
                        closed_form(AttnKind::Ggca, &ggca_params)?,
                    ));
                    rows.push(row(
                        format!("{name}.coord_ffn"),
                        "linear",
                        (0, 0),
                        c,
                        0,
                        k,
                        2 * k as u64 * cu * (COORD_FFN_RATIO as u64 * cu),
                    ));
                    rows.push(row(
                        format!("{name}.gcwa"),
                        "gcwa",
                        (padded, padded),
                        c,
                        m * m,
                        k,
                        closed_form(AttnKind::Gcwa, &gcwa_params)?,
                    ));
                }
            }
            rows.push(row(format!("{name}.glu"), "glu", (grid, grid), c, 0, 0, glu));
        }
        if s < 2 {
            let g_next = config.grid_side(s + 1);
            rows.push(row(
                format!("downsample{}", s + 2),
                "conv",
                (g_next, g_next),
                dims[s + 2],
                0,
                0,
                (g_next * g_next) as u64 * dims[s + 1] as u64 * dims[s + 2] as u64 * 9,
            ));
            if k > 0 {
                let din = dims[s + 1] as u64;
                let dout = dims[s + 2] as u64;
                let ku = k as u64;
                rows.push(row(
                    format!("merge{}", s + 2),
                    "merge",
                    (0, 0),
                    dims[s + 2],
                    0,
                    k,
                    3 * ku * din * dout + 2 * ku * ku * dout,
                ));
            }
        }
    }

    rows.push(row(
        "head".into(),
        "linear",
        (0, 0),
        dims[3],
        0,
        0,
        dims[3] as u64 * config.num_classes as u64,
    ));
    Ok(rows)
}

/// Analytic whole-model MAC total for one sample.
pub fn model_total_macs(config: &ModelConfig) -> Result<u64> {
    Ok(model_cost_rows(config)?.iter().map(|r| r.macs).sum())
}

/// Analytic total excluding the coordinator infrastructure (generator and
/// token mergers), for cost readings that count only the main trunk.
pub fn model_total_macs_excluding_coordinator_infra(config: &ModelConfig) -> Result<u64> {
    Ok(model_cost_rows(config)?
        .iter()
        .filter(|r| r.kind != "generator" && r.kind != "merge")
        .map(|r| r.macs)
        .sum())
}

// ---- formula vs measured report -------------------------------------------

/// One joined report line: analytic formula vs instrumented measurement.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub layer: LayerCost,
    pub measured: u64,
}

impl ReportRow {
    pub fn rel_delta(&self) -> f64 {
        if self.layer.macs == 0 {
            return if self.measured == 0 { 0.0 } else { f64::INFINITY };
        }
        (self.measured as f64 - self.layer.macs as f64) / self.layer.macs as f64
    }
}

/// Formula/measured comparison over a whole model forward.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<ReportRow>,
    pub convention: &'static str,
}

pub const COUNTING_CONVENTION: &str = "MACs of matmul/conv contractions at nominal size; \
biases, softmax, norms, activations and elementwise gates excluded; \
padded window attention charged at padded resolution";

impl CostReport {
    /// Join analytic rows with measured `(name, macs)` rows. Names must
    /// line up one to one; measured counts are per `batch` samples and are
    /// normalized to one.
    pub fn join(
        analytic: Vec<LayerCost>,
        measured: &[(String, u64)],
        batch: u64,
    ) -> Result<CostReport> {
        if analytic.len() != measured.len() {
            return Err(Error::config(format!(
                "cost report: {} analytic rows vs {} measured rows",
                analytic.len(),
                measured.len()
            )));
        }
        let mut rows = Vec::with_capacity(analytic.len());
        for (layer, (name, macs)) in analytic.into_iter().zip(measured.iter()) {
            if layer.name != *name {
                return Err(Error::config(format!(
                    "cost report row mismatch: analytic {} vs measured {name}",
                    layer.name
                )));
            }
            if macs % batch != 0 {
                return Err(Error::config(format!(
                    "measured count {macs} for {name} not divisible by batch {batch}"
                )));
            }
            rows.push(ReportRow {
                layer,
                measured: macs / batch,
            });
        }
        Ok(CostReport {
            rows,
            convention: COUNTING_CONVENTION,
        })
    }

    pub fn total_formula(&self) -> u64 {
        self.rows.iter().map(|r| r.layer.macs).sum()
    }

    pub fn total_measured(&self) -> u64 {
        self.rows.iter().map(|r| r.measured).sum()
    }

    /// Comma-separated rendering with a fixed header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,h,w,C,T,K,formula_macs,measured_macs,rel_delta\n");
        for r in &self.rows {
            let l = &r.layer;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.6}\n",
                l.name,
                l.kind,
                l.h,
                l.w,
                l.c,
                l.t,
                l.k,
                l.macs,
                r.measured,
                r.rel_delta()
            ));
        }
        out
    }
}

// ---- linear scaling of the coordinator overhead ----------------------------

/// One resolution point of [`linear_scaling_check`].
#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub h: usize,
    pub w: usize,
    pub measured_coca: u64,
    pub measured_wsa: u64,
    pub formula_overhead: u64,
    /// The `4KhwC` coordinator term isolated from the overhead.
    pub coordinator_term: u64,
    pub exact: bool,
}

/// Fit of measured CoCA-minus-WSA overhead against `h·w`.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub all_exact: bool,
}

/// Measure CoCA and WSA at several square resolutions and check that the
/// overhead matches the closed form exactly and is linear in `h·w`.
pub fn linear_scaling_check(
    c: usize,
    heads: usize,
    m_side: usize,
    k: usize,
    sides: &[usize],
) -> Result<ScalingReport> {
    use crate::attention::{gcwa_attention, ggca_attention, AttentionWeights};
    use crate::rng::Rng;

    if sides.len() < 3 {
        return Err(Error::config("linear_scaling_check needs >= 3 resolutions"));
    }
    let mut rng = Rng::new(0x5ca1e);
    let weights = AttentionWeights::<f64>::init(&mut rng, c, heads, None)?;
    let mut points = Vec::with_capacity(sides.len());
    for &side in sides {
        if side % m_side != 0 {
            return Err(Error::config(format!(
                "side {side} not divisible by window {m_side}"
            )));
        }
        let grid: crate::Tensor<f64> = rng.normal(&[1, side, side, c], 1.0);
        let coords: crate::Tensor<f64> = rng.normal(&[1, k, c], 1.0);
        let patches = grid.reshape(&[1, side * side, c])?;

        let (_, ggca_macs) = measure(|| ggca_attention(&coords, &patches, &weights));
        let (_, gcwa_macs) = measure(|| gcwa_attention(&grid, Some(&coords), &weights, m_side));
        let (_, wsa_macs) = measure(|| gcwa_attention(&grid, None, &weights, m_side));

        let p = CostParams {
            h: side,
            w: side,
            c,
            m_side,
            k,
        };
        let formula_overhead =
            closed_form(AttnKind::Coca, &p)? - closed_form(AttnKind::Wsa, &p)?;
        let measured_coca = ggca_macs + gcwa_macs;
        let hw = (side * side) as u64;
        let cu = c as u64;
        let ku = k as u64;
        // overhead = 2hwC² + 6KC² + 2K²C + 4KhwC; isolate the last term
        let fixed = 2 * hw * cu * cu + 6 * ku * cu * cu + 2 * ku * ku * cu;
        let coordinator_term = (measured_coca - wsa_macs).saturating_sub(fixed);
        let exact = measured_coca - wsa_macs == formula_overhead
            && coordinator_term == 4 * ku * hw * cu;
        points.push(ScalingPoint {
            h: side,
            w: side,
            measured_coca,
            measured_wsa: wsa_macs,
            formula_overhead,
            coordinator_term,
            exact,
        });
    }

    // least-squares fit of overhead against hw
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.h * p.w) as f64).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|p| (p.measured_coca - p.measured_wsa) as f64)
        .collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r_squared = 1.0 - ss_res / ss_tot;
    let all_exact = points.iter().all(|p| p.exact);
    Ok(ScalingReport {
        points,
        slope,
        intercept,
        r_squared,
        all_exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wsa_worked_example() {
        // h=w=4, C=8, m=2 (T=4): 4·16·64 + 2·4·16·8 = 5120
        let p = CostParams {
            h: 4,
            w: 4,
            c: 8,
            m_side: 2,
            k: 0,
        };
        assert_eq!(closed_form(AttnKind::Wsa, &p).unwrap(), 5120);
    }

    #[test]
    fn ggca_worked_example() {
        // h=w=4, C=8, K=4: 1024 + 2048 + 2·4·(4+16)·8 = 4352
        let p = CostParams {
            h: 4,
            w: 4,
            c: 8,
            m_side: 1,
            k: 4,
        };
        assert_eq!(closed_form(AttnKind::Ggca, &p).unwrap(), 4352);
    }

    #[test]
    fn coca_identity_and_expanded_polynomial() {
        let mut rng = crate::Rng::new(77);
        for _ in 0..200 {
            let m = 1 + rng.below(4);
            let p = CostParams {
                h: m * (1 + rng.below(6)),
                w: m * (1 + rng.below(6)),
                c: 1 + rng.below(64),
                m_side: m,
                k: rng.below(24),
            };
            let coca = closed_form(AttnKind::Coca, &p).unwrap();
            let sum = closed_form(AttnKind::Ggca, &p).unwrap()
                + closed_form(AttnKind::Gcwa, &p).unwrap();
            assert_eq!(coca, sum);
            // expanded form 6(K+hw)C² + (2K² + 2Thw + 4Khw)C
            let hw = (p.h * p.w) as u64;
            let c = p.c as u64;
            let t = p.tokens_per_window() as u64;
            let k = p.k as u64;
            let expanded = 6 * (k + hw) * c * c + (2 * k * k + 2 * t * hw + 4 * k * hw) * c;
            assert_eq!(coca, expanded);
        }
    }

    #[test]
    fn coca_vanishes_relative_to_msa() {
        let mut prev = f64::INFINITY;
        for exp in 3..9 {
            let side = 1usize << exp;
            let p = CostParams {
                h: side,
                w: side,
                c: 64,
                m_side: 8,
                k: 16,
            };
            let ratio = closed_form(AttnKind::Coca, &p).unwrap() as f64
                / closed_form(AttnKind::Msa, &p).unwrap() as f64;
            assert!(ratio < prev, "ratio must fall as hw grows");
            prev = ratio;
        }
        assert!(prev < 0.05, "CoCA/MSA ratio should vanish, got {prev}");
    }

    #[test]
    fn non_divisible_window_rejected() {
        let p = CostParams {
            h: 5,
            w: 4,
            c: 8,
            m_side: 2,
            k: 0,
        };
        assert!(closed_form(AttnKind::Wsa, &p).is_err());
    }
}
