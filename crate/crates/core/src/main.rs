//! Command-line front end: scene synthesis, projection, flow inference,
//! evaluation, toy training, and the grouping benchmark.
//!
//! Exit codes: 0 success, 1 input error, 2 internal invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dgsf::bench::{bench_grouping, candidate_curve, loglog_slope};
use dgsf::error::Error;
use dgsf::grid::project_points;
use dgsf::grouping::KernelSpec;
use dgsf::io;
use dgsf::metrics::evaluate;
use dgsf::network::{
    forward, init_weights, multi_scale_loss, parse_config, toy_train, write_config, NetworkConfig,
};
use dgsf::params::{Bound, ParamSet};
use dgsf::synth::{synth_scaled, SyntheticScene};
use dgsf::tape::Tape;

#[derive(Parser)]
#[command(name = "dgsf", about = "dense-grid scene flow tools", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Project a point cloud file onto a pixel grid.
    Project {
        /// Input cloud file.
        cloud: PathBuf,
        /// Intrinsics as key=value text.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Depth cutoff in meters.
        #[arg(long, default_value_t = 35.0)]
        depth_max: f32,
        /// Output grid file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene with ground-truth flow.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Motion magnitude multiplier.
        #[arg(long, default_value_t = 1.0)]
        motion_scale: f32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the model on a scene directory and write flow files.
    Flow {
        /// Scene directory produced by `synth`.
        scene: PathBuf,
        /// Weights file; freshly initialized when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted flow file against ground truth.
    Eval {
        /// Predicted flow file.
        pred: PathBuf,
        /// Ground-truth flow file.
        #[arg(long)]
        gt: PathBuf,
        /// Grid file holding the frame-1 points.
        #[arg(long)]
        grid: PathBuf,
        /// Intrinsics file.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train on synthetic scenes and write weights plus a loss trace.
    TrainToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 4e-3)]
        lr: f64,
        /// Scale factor on object motion in the generated scenes.
        #[arg(long, default_value_t = 1.0)]
        motion_scale: f32,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time windowed grouping against the whole-grid arm.
    GroupBench {
        #[arg(long, default_value_t = 56269)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also print deterministic work counts across grid sizes.
        #[arg(long)]
        curve: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model config as key=value text; defaults used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation arm: full, no-warp, reproject, no-fusion, concat, no-kbg.
    #[arg(long)]
    mode: Vec<String>,
}

impl ModelArgs {
    fn load(&self) -> anyhow::Result<NetworkConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                parse_config(&text)?
            }
            None => NetworkConfig::small(),
        };
        for m in &self.mode {
            cfg.apply_mode(m)?;
        }
        Ok(cfg)
    }
}

fn load_scene(dir: &Path) -> anyhow::Result<SyntheticScene> {
    let intr = io::read_intrinsics(&dir.join("intrinsics.txt"))?;
    let pc1 = io::read_grid(&dir.join("pc1.grid"))?;
    let pc2 = io::read_grid(&dir.join("pc2.grid"))?;
    let (ih, iw, img1) = io::read_image(&dir.join("img1.img"))?;
    let (_, _, img2) = io::read_image(&dir.join("img2.img"))?;
    if (ih, iw) != (pc1.h, pc1.w) {
        bail!("scene {}: image and grid dims differ", dir.display());
    }
    let (fh, fw, gt_flow, gt_valid) = io::read_flow(&dir.join("gt_flow.flow"))?;
    if (fh, fw) != (pc1.h, pc1.w) {
        bail!("scene {}: flow and grid dims differ", dir.display());
    }
    Ok(SyntheticScene {
        intr,
        pc1,
        pc2,
        img1,
        img2,
        gt_flow,
        gt_valid,
        seed: 0,
    })
}

fn save_scene(dir: &Path, s: &SyntheticScene) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    io::write_intrinsics(&dir.join("intrinsics.txt"), &s.intr)?;
    io::write_grid(&dir.join("pc1.grid"), &s.pc1)?;
    io::write_grid(&dir.join("pc2.grid"), &s.pc2)?;
    io::write_image(&dir.join("img1.img"), s.pc1.h, s.pc1.w, &s.img1)?;
    io::write_image(&dir.join("img2.img"), s.pc1.h, s.pc1.w, &s.img2)?;
    io::write_flow(&dir.join("gt_flow.flow"), s.pc1.h, s.pc1.w, &s.gt_flow, &s.gt_valid)?;
    Ok(())
}

fn report_text(r: &dgsf::metrics::EvalReport) -> String {
    format!(
        "epe3d      {:>9.5} m\n\
         acc0.05    {:>9.4}\n\
         acc0.10    {:>9.4}\n\
         outliers   {:>9.4}\n\
         epe2d      {:>9.4} px\n\
         acc1px     {:>9.4}\n\
         n_valid    {:>9}",
        r.epe3d, r.acc_strict, r.acc_relax, r.outliers, r.epe2d, r.acc1px, r.n_valid
    )
}

fn report_csv(r: &dgsf::metrics::EvalReport) -> String {
    format!(
        "epe3d,acc005,acc010,outliers,epe2d,acc1px,n_valid\n{},{},{},{},{},{},{}\n",
        r.epe3d, r.acc_strict, r.acc_relax, r.outliers, r.epe2d, r.acc1px, r.n_valid
    )
}

fn load_params(cfg: &NetworkConfig, weights: &Option<PathBuf>, seed: u64) -> anyhow::Result<ParamSet> {
    let mut params = init_weights(cfg, seed)?;
    if let Some(path) = weights {
        let values = io::read_weights(path)?;
        params.load_values(values)?;
    }
    Ok(params)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Project {
            cloud,
            intrinsics,
            depth_max,
            out,
        } => {
            let cl = io::read_cloud(&cloud)?;
            let intr = io::read_intrinsics(&intrinsics)?;
            let img = project_points(&cl, &intr, depth_max)?;
            io::write_grid(&out, &img)?;
            println!(
                "projected {} points onto {}x{}: {} valid cells -> {}",
                cl.points.len(),
                img.h,
                img.w,
                img.n_valid(),
                out.display()
            );
        }
        Cmd::Synth {
            seed,
            height,
            width,
            objects,
            motion_scale,
            out,
        } => {
            let s = synth_scaled(seed, height, width, objects, motion_scale)?;
            save_scene(&out, &s)?;
            println!(
                "scene seed {seed}: {}x{} grid, {} valid cells -> {}",
                height,
                width,
                s.pc1.n_valid(),
                out.display()
            );
        }
        Cmd::Flow {
            scene,
            weights,
            model,
            out,
        } => {
            let cfg = model.load()?;
            let s = load_scene(&scene)?;
            let params = load_params(&cfg, &weights, 0)?;
            let mut tape = Tape::new();
            let bound = Bound::bind(&params, &mut tape);
            let pyr = forward(
                &mut tape, &bound, &cfg, &s.pc1, &s.pc2, &s.img1, &s.img2, &s.intr,
            )?;
            fs::create_dir_all(&out)?;
            io::write_flow(&out.join("pred.flow"), pyr.full_h, pyr.full_w, &pyr.full_flow, &pyr.full_valid)?;
            let r = evaluate(&s.pc1, &pyr.full_flow, &s.gt_flow, &s.gt_valid, &s.intr)?;
            let n = s.pc1.n_cells();
            let epe: Vec<f32> = (0..n)
                .map(|i| {
                    let d = [
                        pyr.full_flow[3 * i] - s.gt_flow[3 * i],
                        pyr.full_flow[3 * i + 1] - s.gt_flow[3 * i + 1],
                        pyr.full_flow[3 * i + 2] - s.gt_flow[3 * i + 2],
                    ];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .collect();
            let valid: Vec<bool> = (0..n).map(|i| s.pc1.is_valid(i) && s.gt_valid[i]).collect();
            io::write_ppm_error_map(&out.join("error_map.ppm"), s.pc1.h, s.pc1.w, &epe, &valid, 0.10)?;
            println!("{}", report_text(&r));
        }
        Cmd::Eval {
            pred,
            gt,
            grid,
            intrinsics,
            csv,
        } => {
            let (ph, pw, pflow, _) = io::read_flow(&pred)?;
            let (gh, gw, gflow, gvalid) = io::read_flow(&gt)?;
            let img = io::read_grid(&grid)?;
            let intr = io::read_intrinsics(&intrinsics)?;
            if (ph, pw) != (gh, gw) || (ph, pw) != (img.h, img.w) {
                bail!("eval: flow/grid dimensions disagree");
            }
            let r = evaluate(&img, &pflow, &gflow, &gvalid, &intr)?;
            println!("{}", report_text(&r));
            if let Some(path) = csv {
                fs::write(&path, report_csv(&r))?;
            }
        }
        Cmd::TrainToy {
            seed,
            height,
            width,
            scenes,
            objects,
            steps,
            lr,
            motion_scale,
            model,
            out,
        } => {
            let cfg = model.load()?;
            if scenes == 0 {
                bail!("train-toy: need at least one scene");
            }
            let set: Vec<SyntheticScene> = (0..scenes)
                .map(|i| synth_scaled(seed.wrapping_add(i as u64), height, width, objects, motion_scale))
                .collect::<dgsf::error::Result<_>>()?;
            let mut params = init_weights(&cfg, seed)?;
            let trace = toy_train(&set, &cfg, &mut params, steps, lr)?;
            fs::create_dir_all(&out)?;
            io::write_weights(&out.join("weights.wts"), params.entries())?;
            let mut csv = String::from("step,loss\n");
            for (step, loss) in &trace {
                csv.push_str(&format!("{step},{loss}\n"));
            }
            fs::write(out.join("trace.csv"), csv)?;
            fs::write(out.join("config.txt"), write_config(&cfg))?;
            // report final EPE3D and induced 2D error on the first scene
            let s = &set[0];
            let mut tape = Tape::new();
            let bound = Bound::bind(&params, &mut tape);
            let pyr = forward(
                &mut tape, &bound, &cfg, &s.pc1, &s.pc2, &s.img1, &s.img2, &s.intr,
            )?;
            let loss = multi_scale_loss(
                &mut tape, &pyr.levels, pyr.full_w, &s.gt_flow, &s.gt_valid, &s.intr, &cfg,
            )?;
            let r = evaluate(&s.pc1, &pyr.full_flow, &s.gt_flow, &s.gt_valid, &s.intr)?;
            println!(
                "trained {steps} steps: loss {} -> {} (final eval loss {})",
                trace.first().map(|t| t.1).unwrap_or(f64::NAN),
                trace.last().map(|t| t.1).unwrap_or(f64::NAN),
                tape.value(loss.total).item()
            );
            println!(
                "per-level epe: {}",
                loss.per_level
                    .iter()
                    .map(|e| format!("{e:.5}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            );
            println!("{}", report_text(&r));
        }
        Cmd::GroupBench { n, repeats, curve, csv } => {
            let spec = KernelSpec::new(5, 5, 8, f32::INFINITY);
            if curve {
                let sizes = [1_000, 4_000, 16_000, 56_269];
                let pts = candidate_curve(&sizes, &spec);
                println!("n_valid,kernel_candidates,brute_candidates");
                for &(nv, kc, bc) in &pts {
                    println!("{nv},{kc},{bc}");
                }
                let kernel_pts: Vec<(f64, f64)> =
                    pts.iter().map(|&(nv, kc, _)| (nv as f64, kc as f64)).collect();
                let brute_pts: Vec<(f64, f64)> =
                    pts.iter().map(|&(nv, _, bc)| (nv as f64, bc as f64)).collect();
                println!(
                    "kernel log-log slope {:.3}, whole-grid {:.3}",
                    loglog_slope(&kernel_pts),
                    loglog_slope(&brute_pts)
                );
            }
            let r = bench_grouping(n, &spec, repeats);
            println!("{}", r.text());
            if let Some(path) = csv {
                fs::write(&path, r.csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // invariant breakage (non-finite values, shape violations deep
            // inside the model) is distinguished from bad user input
            let internal = e
                .downcast_ref::<Error>()
                .map(|le| matches!(le, Error::NonFinite(_) | Error::Shape(_)))
                .unwrap_or(false);
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
