//! Full coarse-to-fine model: shared two-frame encoders, per-level
//! image fusion, correlation at the coarsest level, then an
//! upsample / warp / correlate / predict / refine loop per finer level,
//! plus the multi-scale training loss and a small trainer.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost_volume::{
    correlate, correlate_no_warp, correlate_reproject, predict_residual, refine, warp, WarpMode,
};
use crate::error::{Error, Result};
use crate::fusion::{encode_image, fuse, fuse_concat};
use crate::grid::{project_flow_2d, CameraIntrinsics, PointImage};
use crate::grouping::KernelSpec;
use crate::optim::Optimizer;
use crate::params::{Bound, ParamSet};
use crate::pyramid::{setconv_down, set_upconv, PyramidLevel};
use crate::synth::SyntheticScene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Off,
    Concat,
    Attentive,
}

/// Everything the model's shape depends on. Level index 0 is the finest
/// pyramid level (grid stride 2); index `levels-1` is the coarsest.
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub levels: usize,
    /// Point feature channels per level.
    pub channels: Vec<usize>,
    /// Image feature channels per level.
    pub img_channels: Vec<usize>,
    /// Flow embedding channels per level.
    pub emb_channels: Vec<usize>,
    /// Hidden width of both attention score MLPs.
    pub att_hidden: usize,
    /// 2D window and neighbor count for encoder down-sampling.
    pub down_window: (usize, usize),
    pub down_k: usize,
    /// Stage-1 correspondence window per level.
    pub corr_window: Vec<(usize, usize)>,
    pub corr_k: usize,
    /// Stage-2 self-aggregation window.
    pub corr2_window: (usize, usize),
    /// Window and neighbor count for embedding upsampling.
    pub up_window: (usize, usize),
    pub up_k: usize,
    /// 3D outlier radius at the finest level; doubles per level.
    pub base_max_dist: f32,
    pub fusion: FusionMode,
    pub warp: WarpMode,
    /// False switches encoder grouping to whole-grid windows.
    pub kbg: bool,
    /// Per-level loss weights, index 0 = finest supervised level.
    pub loss_weights: Vec<f64>,
    /// Weight of the induced-2D-flow loss term; 0 keeps it off the tape.
    pub flow2d_weight: f64,
}

impl NetworkConfig {
    pub fn small() -> Self {
        NetworkConfig {
            levels: 4,
            channels: vec![8, 8, 12, 16],
            img_channels: vec![4, 4, 4, 4],
            emb_channels: vec![8, 8, 12, 16],
            att_hidden: 6,
            down_window: (5, 5),
            down_k: 8,
            corr_window: vec![(3, 3), (3, 3), (3, 3), (7, 9)],
            corr_k: 4,
            corr2_window: (5, 5),
            up_window: (3, 3),
            up_k: 4,
            base_max_dist: 2.5,
            fusion: FusionMode::Attentive,
            warp: WarpMode::Full,
            kbg: true,
            loss_weights: vec![0.1, 0.2, 0.3, 0.8],
            flow2d_weight: 0.0,
        }
    }

    /// Two-level configuration small enough for finite-difference
    /// checking of the whole forward pass.
    pub fn micro() -> Self {
        NetworkConfig {
            levels: 2,
            channels: vec![3, 4],
            img_channels: vec![2, 2],
            emb_channels: vec![3, 3],
            att_hidden: 3,
            down_window: (3, 3),
            down_k: 4,
            corr_window: vec![(3, 3), (3, 3)],
            corr_k: 3,
            corr2_window: (3, 3),
            up_window: (3, 3),
            up_k: 3,
            base_max_dist: f32::INFINITY,
            fusion: FusionMode::Off,
            warp: WarpMode::Full,
            kbg: true,
            loss_weights: vec![0.1, 0.8],
            flow2d_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0
            || self.channels.len() != l
            || self.img_channels.len() != l
            || self.emb_channels.len() != l
            || self.corr_window.len() != l
            || self.loss_weights.len() != l
        {
            return Err(Error::InvalidArgument(
                "config: per-level lists must match `levels`".into(),
            ));
        }
        if self.loss_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument("config: loss weights must be > 0".into()));
        }
        Ok(())
    }

    fn max_dist(&self, level: usize) -> f32 {
        self.base_max_dist * (1u32 << level) as f32
    }

    fn down_spec(&self, level: usize) -> KernelSpec {
        KernelSpec::new(self.down_window.0, self.down_window.1, self.down_k, self.max_dist(level))
    }

    fn corr_spec(&self, level: usize) -> KernelSpec {
        let (kh, kw) = self.corr_window[level];
        KernelSpec::new(kh, kw, self.corr_k, self.max_dist(level))
    }

    fn corr2_spec(&self, level: usize) -> KernelSpec {
        KernelSpec::new(self.corr2_window.0, self.corr2_window.1, self.corr_k, self.max_dist(level))
    }

    fn up_spec(&self, level: usize) -> KernelSpec {
        KernelSpec::new(self.up_window.0, self.up_window.1, self.up_k, self.max_dist(level + 1))
    }

    /// Apply a named ablation arm on top of the current settings.
    pub fn apply_mode(&mut self, mode: &str) -> Result<()> {
        match mode {
            "full" => {
                self.warp = WarpMode::Full;
            }
            "no-warp" => self.warp = WarpMode::NoWarp,
            "reproject" => self.warp = WarpMode::Reproject,
            "no-fusion" => self.fusion = FusionMode::Off,
            "concat" => self.fusion = FusionMode::Concat,
            "no-kbg" => self.kbg = false,
            other => {
                return Err(Error::InvalidArgument(format!("unknown mode `{other}`")));
            }
        }
        Ok(())
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad count `{t}`")))
        })
        .collect()
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let v = parse_usize_list(s)?;
    if v.len() != 2 {
        return Err(Error::Format(format!("expected two counts, got `{s}`")));
    }
    Ok((v[0], v[1]))
}

fn parse_pair_list(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';').map(parse_pair).collect()
}

/// Parse a `key=value` config text over the `small()` defaults.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::small();
    for (k, v) in crate::io::parse_kv(text)? {
        match k.as_str() {
            "levels" => cfg.levels = v.parse().map_err(|_| Error::Format(format!("levels `{v}`")))?,
            "channels" => cfg.channels = parse_usize_list(&v)?,
            "img_channels" => cfg.img_channels = parse_usize_list(&v)?,
            "emb_channels" => cfg.emb_channels = parse_usize_list(&v)?,
            "att_hidden" => cfg.att_hidden = v.parse().map_err(|_| Error::Format(format!("att_hidden `{v}`")))?,
            "down_window" => cfg.down_window = parse_pair(&v)?,
            "down_k" => cfg.down_k = v.parse().map_err(|_| Error::Format(format!("down_k `{v}`")))?,
            "corr_window" => cfg.corr_window = parse_pair_list(&v)?,
            "corr_k" => cfg.corr_k = v.parse().map_err(|_| Error::Format(format!("corr_k `{v}`")))?,
            "corr2_window" => cfg.corr2_window = parse_pair(&v)?,
            "up_window" => cfg.up_window = parse_pair(&v)?,
            "up_k" => cfg.up_k = v.parse().map_err(|_| Error::Format(format!("up_k `{v}`")))?,
            "base_max_dist" => {
                cfg.base_max_dist = v.parse().map_err(|_| Error::Format(format!("base_max_dist `{v}`")))?
            }
            "fusion" => {
                cfg.fusion = match v.as_str() {
                    "off" => FusionMode::Off,
                    "concat" => FusionMode::Concat,
                    "attentive" => FusionMode::Attentive,
                    other => return Err(Error::Format(format!("fusion `{other}`"))),
                }
            }
            "warp" => {
                cfg.warp = match v.as_str() {
                    "full" => WarpMode::Full,
                    "no-warp" => WarpMode::NoWarp,
                    "reproject" => WarpMode::Reproject,
                    other => return Err(Error::Format(format!("warp `{other}`"))),
                }
            }
            "kbg" => {
                cfg.kbg = match v.as_str() {
                    "true" => true,
                    "false" => false,
                    other => return Err(Error::Format(format!("kbg `{other}`"))),
                }
            }
            "loss_weights" => {
                cfg.loss_weights = v
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad weight `{t}`")))
                    })
                    .collect::<Result<_>>()?
            }
            "flow2d_weight" => {
                cfg.flow2d_weight = v.parse().map_err(|_| Error::Format(format!("flow2d_weight `{v}`")))?
            }
            other => return Err(Error::Format(format!("unknown config key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize a config back to the `key=value` text form.
pub fn write_config(cfg: &NetworkConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let pair = |p: (usize, usize)| format!("{},{}", p.0, p.1);
    let mut s = String::new();
    s.push_str(&format!("levels={}\n", cfg.levels));
    s.push_str(&format!("channels={}\n", list(&cfg.channels)));
    s.push_str(&format!("img_channels={}\n", list(&cfg.img_channels)));
    s.push_str(&format!("emb_channels={}\n", list(&cfg.emb_channels)));
    s.push_str(&format!("att_hidden={}\n", cfg.att_hidden));
    s.push_str(&format!("down_window={}\n", pair(cfg.down_window)));
    s.push_str(&format!("down_k={}\n", cfg.down_k));
    s.push_str(&format!(
        "corr_window={}\n",
        cfg.corr_window.iter().map(|&p| pair(p)).collect::<Vec<_>>().join(";")
    ));
    s.push_str(&format!("corr_k={}\n", cfg.corr_k));
    s.push_str(&format!("corr2_window={}\n", pair(cfg.corr2_window)));
    s.push_str(&format!("up_window={}\n", pair(cfg.up_window)));
    s.push_str(&format!("up_k={}\n", cfg.up_k));
    s.push_str(&format!("base_max_dist={}\n", cfg.base_max_dist));
    s.push_str(&format!(
        "fusion={}\n",
        match cfg.fusion {
            FusionMode::Off => "off",
            FusionMode::Concat => "concat",
            FusionMode::Attentive => "attentive",
        }
    ));
    s.push_str(&format!(
        "warp={}\n",
        match cfg.warp {
            WarpMode::Full => "full",
            WarpMode::NoWarp => "no-warp",
            WarpMode::Reproject => "reproject",
        }
    ));
    s.push_str(&format!("kbg={}\n", cfg.kbg));
    s.push_str(&format!(
        "loss_weights={}\n",
        cfg.loss_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    ));
    s.push_str(&format!("flow2d_weight={}\n", cfg.flow2d_weight));
    s
}

/// Register every learnable tensor the config calls for.
pub fn init_weights(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for l in 0..cfg.levels {
        let c_in = if l == 0 { 3 } else { cfg.channels[l - 1] };
        let c = cfg.channels[l];
        let e = cfg.emb_channels[l];
        p.init_mlp(&format!("enc{l}.mlp"), &[3 + c_in, c], true, &mut rng);
        if cfg.fusion != FusionMode::Off {
            let ic_in = if l == 0 { 3 } else { cfg.img_channels[l - 1] };
            let ic = cfg.img_channels[l];
            p.init_conv(&format!("img{l}.conv"), 3, 3, ic_in, ic, 2, &mut rng);
            if cfg.fusion == FusionMode::Attentive {
                p.init_mlp(&format!("fuse{l}.gate"), &[ic + c, ic], false, &mut rng);
                p.init_mlp(&format!("fuse{l}.proj"), &[ic, ic], false, &mut rng);
            }
            p.init_mlp(&format!("fuse{l}.out"), &[c + ic, c], false, &mut rng);
        }
        p.init_mlp(&format!("cv{l}.att1"), &[4 + 2 * c, cfg.att_hidden, 1], false, &mut rng);
        p.init_mlp(&format!("cv{l}.val"), &[c + 3, e], false, &mut rng);
        p.init_mlp(&format!("cv{l}.att2"), &[4 + 2 * e, cfg.att_hidden, 1], false, &mut rng);
        p.init_mlp(&format!("pred{l}.emb"), &[c + 2 * e, e], true, &mut rng);
        p.init_mlp_zero_head(&format!("pred{l}.flow"), &[e, 3], &mut rng);
        if l + 1 < cfg.levels {
            p.init_mlp(&format!("up{l}.mlp1"), &[3 + cfg.emb_channels[l + 1], e], true, &mut rng);
            p.init_mlp(&format!("up{l}.mlp2"), &[e + c, e], false, &mut rng);
        }
    }
    Ok(p)
}

/// Intrinsics consistent with the strided grid: level cell (i, j) sits
/// at source cell (i·s + s/2, j·s + s/2), so the pixel rule shifts by
/// s/2 and scales by 1/s. Off by at most one cell against the exact
/// strided assignment, which windowed search absorbs.
pub fn level_intrinsics(
    intr: &CameraIntrinsics,
    stride: usize,
    h_l: usize,
    w_l: usize,
) -> CameraIntrinsics {
    let s = stride as f32;
    CameraIntrinsics {
        fx: intr.fx / s,
        fy: intr.fy / s,
        cx: (intr.cx - (stride / 2) as f32) / s,
        cy: (intr.cy - (stride / 2) as f32) / s,
        width: w_l,
        height: h_l,
    }
}

/// One supervised pyramid level of the output.
pub struct LevelOutput {
    pub stride: usize,
    pub points: PointImage,
    pub flow: Var,
    pub valid: Vec<bool>,
}

pub struct FlowPyramid {
    /// Index 0 = finest level (stride 2).
    pub levels: Vec<LevelOutput>,
    pub full_h: usize,
    pub full_w: usize,
    /// Full-resolution flow, nearest-copied from the finest level.
    pub full_flow: Vec<f32>,
    pub full_valid: Vec<bool>,
    /// Induced 2D flow at full resolution.
    pub flow2d: Vec<f32>,
    pub flow2d_ok: Vec<bool>,
}

fn nearest_map(fine_h: usize, fine_w: usize, coarse_h: usize, coarse_w: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(fine_h * fine_w);
    for i in 0..fine_h {
        for j in 0..fine_w {
            let ci = (i / 2).min(coarse_h - 1);
            let cj = (j / 2).min(coarse_w - 1);
            map.push(ci * coarse_w + cj);
        }
    }
    map
}

fn encode_point_pyramid(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &NetworkConfig,
    pc: &PointImage,
) -> Vec<PyramidLevel> {
    let coords = Tensor::from_f32(&[pc.n_cells(), 3], pc.coords_flat()).unwrap();
    let mut feats = tape.constant(coords);
    let mut points = pc.clone();
    let mut out = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let mlp = bound.mlp(&format!("enc{l}.mlp"));
        let lvl = setconv_down(tape, &points, feats, l, 2, &cfg.down_spec(l), &mlp, !cfg.kbg);
        points = lvl.points.clone();
        feats = lvl.features;
        out.push(lvl);
    }
    out
}

fn encode_images(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &NetworkConfig,
    h: usize,
    w: usize,
    rgb: &[f32],
) -> Result<Vec<Var>> {
    if rgb.len() != h * w * 3 {
        return Err(Error::Shape("forward: image buffer size".into()));
    }
    let img = tape.constant(Tensor::from_f32(&[h, w, 3], rgb)?);
    let convs: Vec<_> = (0..cfg.levels).map(|l| bound.conv(&format!("img{l}.conv"))).collect();
    Ok(encode_image(tape, img, &convs))
}

/// Run one frame pair through the model. Images are H×W×3 RGB and are
/// consulted only when fusion is enabled.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &NetworkConfig,
    pc1: &PointImage,
    pc2: &PointImage,
    img1: &[f32],
    img2: &[f32],
    intr: &CameraIntrinsics,
) -> Result<FlowPyramid> {
    cfg.validate()?;
    if pc1.h != pc2.h || pc1.w != pc2.w {
        return Err(Error::Shape("forward: frame grids must match".into()));
    }
    if cfg.fusion != FusionMode::Off && (pc1.h % (1 << cfg.levels) != 0 || pc1.w % (1 << cfg.levels) != 0)
    {
        return Err(Error::InvalidArgument(format!(
            "forward: fusion requires grid dims divisible by {}",
            1 << cfg.levels
        )));
    }

    let mut pyr1 = encode_point_pyramid(tape, bound, cfg, pc1);
    let mut pyr2 = encode_point_pyramid(tape, bound, cfg, pc2);

    if cfg.fusion != FusionMode::Off {
        let if1 = encode_images(tape, bound, cfg, pc1.h, pc1.w, img1)?;
        let if2 = encode_images(tape, bound, cfg, pc1.h, pc1.w, img2)?;
        for l in 0..cfg.levels {
            let w_out = bound.mlp(&format!("fuse{l}.out"));
            for (pyr, imf) in [(&mut pyr1, &if1), (&mut pyr2, &if2)] {
                let valid = Rc::new(pyr[l].points.valid_mask().to_vec());
                pyr[l].features = match cfg.fusion {
                    FusionMode::Attentive => {
                        let w_gate = bound.mlp(&format!("fuse{l}.gate"));
                        let w_proj = bound.mlp(&format!("fuse{l}.proj"));
                        fuse(tape, imf[l], pyr[l].features, &w_gate, &w_proj, &w_out, valid)
                    }
                    FusionMode::Concat => fuse_concat(tape, imf[l], pyr[l].features, &w_out, valid),
                    FusionMode::Off => unreachable!(),
                };
            }
        }
    }

    // coarse-to-fine refinement
    let mut outputs: Vec<LevelOutput> = Vec::with_capacity(cfg.levels);
    let mut prev: Option<(Var, Var)> = None; // (flow, refined embedding) of coarser level
    for l in (0..cfg.levels).rev() {
        let p1 = &pyr1[l].points;
        let p2 = &pyr2[l].points;
        let (f1, f2) = (pyr1[l].features, pyr2[l].features);
        let n = p1.n_cells();
        let stride = 1usize << (l + 1);
        let intr_l = level_intrinsics(intr, stride, p1.h, p1.w);

        let (coarse_flow, up_emb) = match &prev {
            None => {
                let zf = tape.constant(Tensor::zeros(&[n, 3]));
                let ze = tape.constant(Tensor::zeros(&[n, cfg.emb_channels[l]]));
                (zf, ze)
            }
            Some((cflow, cemb)) => {
                let cp = &pyr1[l + 1].points;
                let map = Rc::new(nearest_map(p1.h, p1.w, cp.h, cp.w));
                let up_flow = tape.upsample_rows(*cflow, map);
                let w1 = bound.mlp(&format!("up{l}.mlp1"));
                let w2 = bound.mlp(&format!("up{l}.mlp2"));
                let up_emb = set_upconv(tape, cp, *cemb, p1, f1, 2, &cfg.up_spec(l), &w1, &w2);
                (up_flow, up_emb)
            }
        };

        let w_att1 = bound.mlp(&format!("cv{l}.att1"));
        let w_att2 = bound.mlp(&format!("cv{l}.att2"));
        let w_val = bound.mlp(&format!("cv{l}.val"));
        let spec = cfg.corr_spec(l);
        let spec2 = cfg.corr2_spec(l);
        let emb = match cfg.warp {
            WarpMode::Full => {
                let flow_f32 = tape.value(coarse_flow).to_f32();
                let (warped, widx) = warp(p1, &flow_f32, &intr_l);
                correlate(
                    tape, &warped, &widx, p1, p2, f1, f2, &spec, &spec2, &w_att1, &w_att2, &w_val,
                )
            }
            WarpMode::NoWarp => correlate_no_warp(
                tape, p1, p2, f1, f2, &spec, &spec2, &w_att1, &w_att2, &w_val,
            ),
            WarpMode::Reproject => {
                let flow_f32 = tape.value(coarse_flow).to_f32();
                let (warped, _) = warp(p1, &flow_f32, &intr_l);
                correlate_reproject(
                    tape, &warped, p1, p2, f1, f2, &intr_l, &spec, &spec2, &w_att1, &w_att2,
                    &w_val,
                )
            }
        };
        let w_pred = bound.mlp(&format!("pred{l}.emb"));
        let w_flow = bound.mlp(&format!("pred{l}.flow"));
        let (residual, refined_emb) = predict_residual(tape, f1, &emb, up_emb, &w_pred, &w_flow);
        let flow = refine(tape, coarse_flow, residual);
        if !tape.value(flow).is_finite() {
            return Err(Error::NonFinite(format!("forward: level {l} flow")));
        }
        prev = Some((flow, refined_emb));
        outputs.push(LevelOutput {
            stride,
            points: p1.clone(),
            flow,
            valid: p1.valid_mask().to_vec(),
        });
    }
    outputs.reverse();

    // full-resolution flow by nearest copy from the finest level
    let finest = &outputs[0];
    let fmap = nearest_map(pc1.h, pc1.w, finest.points.h, finest.points.w);
    let fdata = tape.value(finest.flow).to_f32();
    let n_full = pc1.n_cells();
    let mut full_flow = vec![0.0f32; n_full * 3];
    let mut full_valid = vec![false; n_full];
    for i in 0..n_full {
        let src = fmap[i];
        full_flow[3 * i..3 * i + 3].copy_from_slice(&fdata[3 * src..3 * src + 3]);
        full_valid[i] = pc1.is_valid(i) && finest.valid[src];
    }
    let (flow2d, flow2d_ok) = project_flow_2d(pc1, &full_flow, intr)?;
    Ok(FlowPyramid {
        levels: outputs,
        full_h: pc1.h,
        full_w: pc1.w,
        full_flow,
        full_valid,
        flow2d,
        flow2d_ok,
    })
}

/// Full-resolution source cell of a level-`l` cell along one axis:
/// iterated stride-2 center selection composes to s·i + (s−1), s = 2^(l+1).
pub fn full_res_axis(level: usize, i: usize) -> usize {
    let s = 1usize << (level + 1);
    s * i + (s - 1)
}

/// Strided sub-sampling of the full-resolution ground truth to one
/// pyramid level, aligned with the encoder's center selection.
pub fn subsample_gt(
    level: usize,
    lvl_points: &PointImage,
    full_w: usize,
    gt_flow: &[f32],
    gt_valid: &[bool],
) -> (Vec<f32>, Vec<bool>) {
    let (h_l, w_l) = (lvl_points.h, lvl_points.w);
    let mut flow = vec![0.0f32; h_l * w_l * 3];
    let mut valid = vec![false; h_l * w_l];
    for i in 0..h_l {
        for j in 0..w_l {
            let src = full_res_axis(level, i) * full_w + full_res_axis(level, j);
            let dst = i * w_l + j;
            flow[3 * dst..3 * dst + 3].copy_from_slice(&gt_flow[3 * src..3 * src + 3]);
            valid[dst] = gt_valid[src];
        }
    }
    (flow, valid)
}

pub struct LossBreakdown {
    pub total: Var,
    /// Mean per-level endpoint error actually entering the sum.
    pub per_level: Vec<f64>,
    /// Levels skipped because no cell was supervised.
    pub empty_levels: Vec<usize>,
    /// Mean induced 2D endpoint error at the finest level, when the
    /// 2D term is enabled.
    pub flow2d_term: Option<f64>,
}

/// Weighted multi-scale endpoint loss:
/// total = Σ_l w_l · mean over supervised cells of ‖pred_l − gt_l‖₂.
pub fn multi_scale_loss(
    tape: &mut Tape,
    levels: &[LevelOutput],
    full_w: usize,
    gt_flow: &[f32],
    gt_valid: &[bool],
    intr: &CameraIntrinsics,
    cfg: &NetworkConfig,
) -> Result<LossBreakdown> {
    if levels.len() != cfg.loss_weights.len() {
        return Err(Error::Shape("loss: level count vs weights".into()));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut per_level = Vec::with_capacity(levels.len());
    let mut empty = Vec::new();
    for (l, lvl) in levels.iter().enumerate() {
        let (gt_l, gtv_l) = subsample_gt(l, &lvl.points, full_w, gt_flow, gt_valid);
        let mask: Vec<bool> = (0..lvl.points.n_cells())
            .map(|i| lvl.valid[i] && gtv_l[i])
            .collect();
        if mask.iter().all(|&b| !b) {
            empty.push(l);
            per_level.push(0.0);
            continue;
        }
        let n = lvl.points.n_cells();
        let gt_t = tape.constant(Tensor::from_f32(&[n, 3], &gt_l)?);
        let diff = tape.sub(lvl.flow, gt_t);
        let e = tape.norm_rows(diff);
        let mean = tape.masked_mean(e, Rc::new(mask));
        per_level.push(tape.value(mean).item());
        let weighted = tape.scale(mean, cfg.loss_weights[l]);
        total = tape.add(total, weighted);
    }
    let mut flow2d_term = None;
    if cfg.flow2d_weight > 0.0 {
        let fine = &levels[0];
        let intr_l = level_intrinsics(intr, fine.stride, fine.points.h, fine.points.w);
        let (gt_l, gtv_l) = subsample_gt(0, &fine.points, full_w, gt_flow, gt_valid);
        let e2d = flow2d_epe(tape, fine, &intr_l, &gt_l, &gtv_l)?;
        flow2d_term = Some(tape.value(e2d).item());
        let weighted = tape.scale(e2d, cfg.flow2d_weight);
        total = tape.add(total, weighted);
    }
    Ok(LossBreakdown {
        total,
        per_level,
        empty_levels: empty,
        flow2d_term,
    })
}

/// Select one channel of an n×3 tensor as n×1 using a constant one-hot
/// weighting.
fn channel(tape: &mut Tape, x: Var, ch: usize) -> Var {
    let n = tape.value(x).shape()[0];
    let mut w = vec![0.0f64; n * 3];
    for i in 0..n {
        w[i * 3 + ch] = 1.0;
    }
    let a = tape.constant(Tensor::from_vec(&[n, 3], w).unwrap());
    let v = tape.reshape(x, &[n, 3, 1]);
    tape.weighted_sum_k(a, v)
}

/// Differentiable mean 2D endpoint error of a level's flow against the
/// ground truth, through the projection u = fx·x/z + cx. Cells whose
/// predicted or true motion leaves the camera's front half-space are
/// masked out.
fn flow2d_epe(
    tape: &mut Tape,
    lvl: &LevelOutput,
    intr_l: &CameraIntrinsics,
    gt_flow: &[f32],
    gt_valid: &[bool],
) -> Result<Var> {
    let n = lvl.points.n_cells();
    let (gt2d, gok) = project_flow_2d(&lvl.points, gt_flow, intr_l)?;
    let pred_f32 = tape.value(lvl.flow).to_f32();
    let mut mask = vec![false; n];
    let mut x0 = vec![0.0f64; n];
    let mut y0 = vec![0.0f64; n];
    let mut z0 = vec![0.0f64; n];
    let mut base_u = vec![0.0f64; n];
    let mut base_v = vec![0.0f64; n];
    for i in 0..n {
        if !lvl.valid[i] || !gt_valid[i] || !gok[i] {
            continue;
        }
        let p = lvl.points.get(i);
        let zp = p[2] as f64 + pred_f32[3 * i + 2] as f64;
        if zp <= 0.05 {
            continue;
        }
        mask[i] = true;
        x0[i] = p[0] as f64;
        y0[i] = p[1] as f64;
        z0[i] = p[2] as f64;
        // target pixel displacement folded into one constant per axis
        base_u[i] = intr_l.fx as f64 * x0[i] / z0[i] + gt2d[2 * i] as f64;
        base_v[i] = intr_l.fy as f64 * y0[i] / z0[i] + gt2d[2 * i + 1] as f64;
    }
    let fu = channel(tape, lvl.flow, 0);
    let fv = channel(tape, lvl.flow, 1);
    let fz = channel(tape, lvl.flow, 2);
    let zc = tape.constant(Tensor::from_vec(&[n, 1], z0.clone())?);
    let znew = tape.add(fz, zc);
    // guarded reciprocal: masked-out cells may hold z' <= 0
    let zv = tape.value(znew).clone();
    let mut rdata = vec![0.0f64; n];
    for i in 0..n {
        let t = zv.data()[i];
        if t > 1e-6 {
            rdata[i] = 1.0 / t;
        }
    }
    let recip = tape.unary_op(
        znew,
        Tensor::from_vec(&[n, 1], rdata)?,
        Box::new(|out, g, _x| {
            let mut gx = Tensor::zeros(out.shape());
            {
                let gxd = gx.data_mut();
                for i in 0..out.len() {
                    let r = out.data()[i];
                    gxd[i] = -g.data()[i] * r * r;
                }
            }
            gx
        }),
    );
    let xc = tape.constant(Tensor::from_vec(&[n, 1], x0)?);
    let yc = tape.constant(Tensor::from_vec(&[n, 1], y0)?);
    let xnew = tape.add(fu, xc);
    let ynew = tape.add(fv, yc);
    let un = tape.mul(xnew, recip);
    let vn = tape.mul(ynew, recip);
    let un = tape.scale(un, intr_l.fx as f64);
    let vn = tape.scale(vn, intr_l.fy as f64);
    let bu = tape.constant(Tensor::from_vec(&[n, 1], base_u)?);
    let bv = tape.constant(Tensor::from_vec(&[n, 1], base_v)?);
    let du = tape.sub(un, bu);
    let dv = tape.sub(vn, bv);
    let d = tape.concat_last(&[du, dv]);
    let e = tape.norm_rows(d);
    Ok(tape.masked_mean(e, Rc::new(mask)))
}

/// A few gradient steps on synthetic scenes. Returns the loss trace,
/// one entry per step plus the initial loss; `params` holds the final
/// weights.
pub fn toy_train(
    scenes: &[SyntheticScene],
    cfg: &NetworkConfig,
    params: &mut ParamSet,
    steps: usize,
    lr: f64,
) -> Result<Vec<(usize, f64)>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("toy_train: no scenes".into()));
    }
    let mut opt = Optimizer::adam(lr, params.len());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let scene = &scenes[step % scenes.len()];
        let mut tape = Tape::new();
        let bound = Bound::bind(params, &mut tape);
        let pyr = forward(
            &mut tape, &bound, cfg, &scene.pc1, &scene.pc2, &scene.img1, &scene.img2, &scene.intr,
        )?;
        let loss = multi_scale_loss(
            &mut tape,
            &pyr.levels,
            pyr.full_w,
            &scene.gt_flow,
            &scene.gt_valid,
            &scene.intr,
            cfg,
        )?;
        let lv = tape.value(loss.total).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("toy_train: loss at step {step}")));
        }
        trace.push((step, lv));
        if step < steps {
            let grads = tape.backward(loss.total);
            opt.step(params, &grads[..params.len()]);
        }
    }
    Ok(trace)
}
