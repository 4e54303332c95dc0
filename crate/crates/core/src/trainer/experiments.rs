use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::train::{batch_objective, evaluate, probe_richness, probe_windows, train_on, ExperimentRecord};
use crate::datakit::{Dataset, Split};
use crate::diffmath::rng::{normal_tensor, seeded, Rng};
use crate::diffmath::{grad_check_many, Graph, Tensor, Var};
use crate::divloss::{dcs_loss_var, DCS_EPS};
use crate::encoder::{
    decode_var, encoder_block_var, multi_head_attention_var, AttentionParams, DecoderHead, EncoderBlock, Model,
    ModelConfig, QueryRows, TokenizeMode,
};
use crate::error::{Error, Result};
use crate::richness::{pearson, wilcoxon_signed_rank, StatReport};
use crate::seqcomp::{SeriesWindow, TokenVar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub diversification: bool,
    pub mse: f64,
    pub mae: f64,
    pub per_seed_mse: Vec<f64>,
}

/// `(K, diversification)` settings in grid order. Diversifying fewer than
/// two complementors is meaningless, so those settings run without it only.
pub fn ablation_grid(k_grid: &[usize], div_modes: &[bool]) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    for &k in k_grid {
        for &div in div_modes {
            let setting = (k, div && k >= 2);
            if !out.contains(&setting) {
                out.push(setting);
            }
        }
    }
    out
}

pub fn ablate(ds: &Dataset, base: &TrainConfig, k_grid: &[usize], div_modes: &[bool]) -> Result<Vec<AblationRow>> {
    if k_grid.is_empty() || div_modes.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    ablation_grid(k_grid, div_modes)
        .into_iter()
        .map(|(k, div)| {
            let mut cfg = base.clone();
            cfg.k_complementors = k;
            cfg.diversification = div;
            let rec = train_on(ds, &cfg)?.record;
            Ok(AblationRow {
                k,
                diversification: div,
                mse: rec.mean_test.mse,
                mae: rec.mean_test.mae,
                per_seed_mse: rec.runs.iter().map(|r| r.test.mse).collect(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,diversification,mse,mae\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.k, r.diversification, r.mse, r.mae));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub label: String,
    pub entropy: f64,
    pub dominant_ratio: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: Vec<ScatterRow>,
    pub entropy_vs_mse: StatReport,
    /// Absent when every model has the same dominant ratio.
    pub ratio_vs_mse: Option<StatReport>,
}

impl AnalysisReport {
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("label,entropy,dominant_ratio,mse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.entropy, r.dominant_ratio, r.mse));
        }
        out
    }
}

/// Correlates richness with error across models.
pub fn analyze_rows(rows: Vec<ScatterRow>) -> Result<AnalysisReport> {
    if rows.len() < 3 {
        return Err(Error::Config(format!("analysis needs at least 3 models, got {}", rows.len())));
    }
    let mse: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let entropy: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
    let ratio: Vec<f64> = rows.iter().map(|r| r.dominant_ratio).collect();
    let entropy_vs_mse = pearson(&entropy, &mse)?;
    let ratio_vs_mse = match pearson(&ratio, &mse) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AnalysisReport {
        rows,
        entropy_vs_mse,
        ratio_vs_mse,
    })
}

/// Probe-batch richness and test MSE of each checkpoint on `ds`.
pub fn analyze_checkpoints(items: &[(String, Checkpoint)], ds: &Dataset) -> Result<AnalysisReport> {
    let rows = items
        .iter()
        .map(|(label, ck)| {
            let probe = probe_windows(ds, &ck.config)?;
            let (entropy, dominant_ratio) = probe_richness(&ck.model, &probe)?;
            Ok(ScatterRow {
                label: label.clone(),
                entropy,
                dominant_ratio,
                mse: evaluate(ck, ds, Split::Test, false)?.mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    analyze_rows(rows)
}

/// Paired signed-rank test between two metric vectors.
pub fn compare(a: &[f64], b: &[f64]) -> Result<StatReport> {
    wilcoxon_signed_rank(a, b)
}

/// Per-run test MSE followed by per-run test MAE.
pub fn paired_metrics(record: &ExperimentRecord) -> Vec<f64> {
    let runs = record.per_run_test();
    runs.iter().map(|r| r.0).chain(runs.iter().map(|r| r.1)).collect()
}

pub type ComponentFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A differentiable function of some tensors, to be checked against finite
/// differences.
pub struct ComponentCheck {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: ComponentFn,
    /// Perturb only every n-th coordinate.
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSuite {
    pub seed: u64,
    pub results: Vec<ComponentResult>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn run_checks(seed: u64, checks: Vec<ComponentCheck>) -> Result<GradCheckSuite> {
    let results = checks
        .into_iter()
        .map(|c| {
            let r = grad_check_many(&c.f, &c.inputs, GRADCHECK_STEP, GRADCHECK_TOL, c.stride)?;
            Ok(ComponentResult {
                name: c.name,
                max_rel_error: r.max_rel_error,
                coords_checked: r.coords_checked,
                passed: r.passed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckSuite { seed, results })
}

/// Every differentiable building block plus the two end-to-end paths.
pub fn gradcheck_all(seed: u64) -> Result<GradCheckSuite> {
    run_checks(seed, standard_components(seed))
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(x, c)?;
    Ok(g.sum(m))
}

fn check(
    name: &str,
    inputs: Vec<Tensor>,
    stride: Option<usize>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> ComponentCheck {
    ComponentCheck {
        name: name.to_string(),
        inputs,
        f: Box::new(f),
        stride,
    }
}

// Random-weighted sum of a component's output, so no gradient is trivially
// symmetric.
fn probe(
    rng: &mut Rng,
    name: &str,
    inputs: Vec<Tensor>,
    out_shape: [usize; 2],
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> ComponentCheck {
    let w = normal_tensor(rng, out_shape[0], out_shape[1], 1.0);
    check(name, inputs, None, move |g, v| {
        let y = op(g, v)?;
        weighted_sum(g, y, &w)
    })
}

fn tiny_model_config(mode: TokenizeMode) -> ModelConfig {
    ModelConfig {
        t_in: 16,
        t_out: 4,
        patch_len: 4,
        stride: 4,
        k_complementors: 2,
        d_model: 8,
        heads: 2,
        blocks: 2,
        d_ff: 12,
        n_channels: 2,
        tokenize_mode: mode,
        share_complementors: false,
        restrict_final_queries: false,
        dropout: 0.0,
    }
}

fn end_to_end(rng: &mut Rng, name: &str, mode: TokenizeMode, with_dcs: bool) -> Result<ComponentCheck> {
    let mcfg = tiny_model_config(mode);
    let model = Model::new(mcfg.clone(), rng)?;
    let window = SeriesWindow::new(
        normal_tensor(rng, mcfg.t_in, mcfg.n_channels, 1.0),
        normal_tensor(rng, mcfg.t_out, mcfg.n_channels, 1.0),
        vec!["a".into(), "b".into()],
    )?;
    let mut tcfg = TrainConfig {
        diversification: with_dcs,
        ..TrainConfig::default()
    };
    tcfg.k_complementors = mcfg.k_complementors;
    let template = model.clone();
    Ok(check(name, model.params.tensors(), None, move |g, vars| {
        let mut it = vars.iter().copied();
        let params = template.params.map(|_| it.next().expect("one var per parameter"));
        let bank_norm = params
            .banks
            .iter()
            .map(|&b| g.normalize_rows(b))
            .collect::<Result<Vec<_>>>()?;
        let bound = crate::encoder::BoundModel {
            config: &template.config,
            params,
            bank_norm,
        };
        let obj = batch_objective(g, &bound, std::slice::from_ref(&window), &tcfg, &mut None)?;
        Ok(obj.l_obj)
    }))
}

pub fn standard_components(seed: u64) -> Vec<ComponentCheck> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    let mut n = |rows, cols| normal_tensor(r, rows, cols, 1.0);
    let (a, b, c, d) = (n(3, 4), n(4, 2), n(2, 4), n(3, 4));
    let (bias, pre, wide, ln_x) = (n(1, 4), n(2, 4), n(3, 5), n(4, 6));
    let (gamma, beta, bank, target) = (n(1, 6), n(1, 6), n(3, 8), n(3, 4));
    let scale: Vec<f64> = n(1, 3).data().iter().map(|v| v.abs() + 0.5).collect();
    let shift: Vec<f64> = n(1, 3).into_data();

    let mut checks = vec![
        probe(&mut rng, "matmul", vec![a.clone(), b], [3, 2], |g, v| g.matmul(v[0], v[1])),
        probe(&mut rng, "matmul_nt", vec![a.clone(), c], [3, 2], |g, v| g.matmul_nt(v[0], v[1])),
        probe(&mut rng, "add_sub_mul", vec![a.clone(), d.clone()], [3, 4], |g, v| {
            let s = g.add(v[0], v[1])?;
            let t = g.sub(v[0], v[1])?;
            g.mul(s, t)
        }),
        probe(&mut rng, "add_row", vec![a.clone(), bias], [3, 4], |g, v| g.add_row(v[0], v[1])),
        probe(&mut rng, "add_prefix_rows", vec![a.clone(), pre], [3, 4], |g, v| g.add_prefix_rows(v[0], v[1])),
        probe(&mut rng, "affine_rows", vec![a.clone()], [3, 4], move |g, v| {
            g.affine_rows(v[0], &scale, &shift)
        }),
        probe(&mut rng, "scale_offset_mean", vec![a.clone()], [1, 1], |g, v| {
            let s = g.scale(v[0], -1.7);
            let o = g.offset(s, 0.3);
            let sq = g.mul(o, o)?;
            Ok(g.mean(sq))
        }),
        probe(&mut rng, "slice_concat_transpose", vec![a.clone(), d.clone()], [4, 5], |g, v| {
            let top = g.slice_rows(v[0], 1, 3)?;
            let cat = g.concat_rows(&[top, v[1]])?;
            Ok(g.transpose(cat))
        }),
        probe(&mut rng, "reshape_flatten", vec![a.clone()], [1, 12], |g, v| {
            let r = g.reshape(v[0], 6, 2)?;
            let sq = g.mul(r, r)?;
            Ok(g.flatten(sq))
        }),
        probe(&mut rng, "softmax_rows", vec![wide.clone()], [3, 5], |g, v| Ok(g.softmax_rows(v[0]))),
        probe(&mut rng, "masked_softmax", vec![wide.clone()], [3, 5], |g, v| {
            let m = g.mask_cols_from(v[0], 3);
            Ok(g.softmax_rows(m))
        }),
        probe(&mut rng, "layer_norm", vec![ln_x, gamma, beta], [4, 6], |g, v| g.layer_norm(v[0], v[1], v[2])),
        probe(&mut rng, "gelu", vec![a.clone()], [3, 4], |g, v| Ok(g.gelu(v[0]))),
        probe(&mut rng, "normalize_rows", vec![wide], [3, 5], |g, v| g.normalize_rows(v[0])),
        check("squared_error", vec![a.clone()], None, move |g, v| g.squared_error(v[0], target.clone())),
        check("bank_to_dcs", vec![bank], None, |g, v| {
            let s = g.normalize_rows(v[0])?;
            dcs_loss_var(g, s, DCS_EPS)
        }),
    ];

    let attn = AttentionParams::random(&mut rng, 8, 2).expect("valid shape");
    let z = normal_tensor(&mut rng, 5, 8, 1.0);
    let mut attn_inputs = vec![z.clone()];
    let n_attn = 4 * attn.heads();
    for h in 0..attn.heads() {
        attn_inputs.extend([attn.w_q[h].clone(), attn.w_k[h].clone(), attn.w_v[h].clone(), attn.w_o[h].clone()]);
    }
    for (name, rows) in [("attention", QueryRows::All), ("attention_restricted", QueryRows::Original)] {
        let out_rows = if rows == QueryRows::All { 5 } else { 3 };
        checks.push(probe(&mut rng, name, attn_inputs.clone(), [out_rows, 8], move |g, v| {
            let p = unpack_attention(&v[1..1 + n_attn]);
            let tv = TokenVar {
                var: v[0],
                n_original: 3,
                n_complementors: 2,
            };
            multi_head_attention_var(g, tv, &p, rows, false)
        }));
    }

    let block = EncoderBlock::random(&mut rng, 8, 2, 12).expect("valid shape");
    let block = EncoderBlock {
        ln1_gamma: normal_tensor(&mut rng, 1, 8, 1.0),
        ln2_beta: normal_tensor(&mut rng, 1, 8, 1.0),
        ..block
    };
    let mut block_inputs = vec![z];
    let _ = block.map(|t| block_inputs.push(t.clone()));
    let template = block.clone();
    checks.push(probe(&mut rng, "encoder_block", block_inputs, [5, 8], move |g, v| {
        let mut it = v[1..].iter().copied();
        let bv = template.map(|_| it.next().expect("one var per tensor"));
        let tv = TokenVar {
            var: v[0],
            n_original: 3,
            n_complementors: 2,
        };
        Ok(encoder_block_var(g, tv, &bv, QueryRows::All, false, &mut None)?.var)
    }));

    let z_enc = normal_tensor(&mut rng, 5, 4, 1.0);
    let head = (normal_tensor(&mut rng, 12, 6, 0.5), normal_tensor(&mut rng, 1, 6, 1.0));
    checks.push(probe(&mut rng, "decode", vec![z_enc, head.0, head.1], [1, 6], |g, v| {
        decode_var(g, v[0], &DecoderHead { w: v[1], b: v[2] }, 3)
    }));

    for (name, mode, dcs) in [
        ("end_to_end_mse", TokenizeMode::Patch, false),
        ("end_to_end_objective", TokenizeMode::Patch, true),
        ("end_to_end_inverted", TokenizeMode::Invert, true),
    ] {
        checks.push(end_to_end(&mut rng, name, mode, dcs).expect("tiny model builds"));
    }
    checks
}

fn unpack_attention(v: &[Var]) -> AttentionParams<Var> {
    let mut p = AttentionParams {
        w_q: vec![],
        w_k: vec![],
        w_v: vec![],
        w_o: vec![],
    };
    for h in v.chunks(4) {
        p.w_q.push(h[0]);
        p.w_k.push(h[1]);
        p.w_v.push(h[2]);
        p.w_o.push(h[3]);
    }
    p
}
