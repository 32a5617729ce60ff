use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;
use sparsync::analysis::{
    absorption_threshold, adam_bound, adversarial_sequence, constant_gradients, critical_weight, frozen_fraction,
    is_absorbed_exact, simulate_absorbed_updates, simulate_adam_ratio, sparsity, AdamConfig, CriticalMode, Horizon,
    PrecisionMode,
};
use sparsync::Bf16;

use crate::data::{frac, load};
use crate::error::CliError;
use crate::Report;

#[derive(Debug, Args)]
pub struct AdamArgs {
    #[arg(long, default_value_t = 3e-6)]
    eta: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
}

impl AdamArgs {
    fn config(&self) -> AdamConfig {
        AdamConfig {
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    /// Uses the asymptotic Adam bound.
    Theoretical,
    /// Assumes |m/sqrt(v)| of about 1.
    Effective,
}

impl From<Mode> for CriticalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Theoretical => CriticalMode::Theoretical,
            Mode::Effective => CriticalMode::Effective,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Precision {
    PureBf16,
    Fp32Master,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Whether an update is absorbed by BF16 rounding, or simulate updates
    /// on a checkpoint.
    Absorb(AbsorbArgs),
    /// Bound on |Adam update| / eta.
    Bound {
        #[command(flatten)]
        adam: AdamArgs,
        /// Bound at this step instead of the asymptote.
        #[arg(long)]
        step: Option<u64>,
    },
    /// Weight magnitude above which updates are absorbed.
    Critical {
        #[command(flatten)]
        adam: AdamArgs,
        #[arg(long, value_enum, default_value_t = Mode::Theoretical)]
        mode: Mode,
    },
    /// Fraction of weights above the critical magnitude.
    Frozen {
        file: PathBuf,
        #[command(flatten)]
        adam: AdamArgs,
        #[arg(long, value_enum, default_value_t = Mode::Effective)]
        mode: Mode,
        /// Explicit magnitude threshold instead of the critical weight.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Bitwise sparsity between two checkpoints.
    Sparsity {
        prev: PathBuf,
        curr: PathBuf,
        /// Step distance between the two checkpoints.
        #[arg(long, default_value_t = 1)]
        k: u64,
    },
    /// Simulate the Adam update ratio |m_hat| / (sqrt(v_hat) + eps).
    Adamsim(AdamsimArgs),
}

#[derive(Debug, Args)]
pub struct AbsorbArgs {
    /// Weight value, rounded to BF16.
    #[arg(long, required_unless_present = "checkpoint", allow_hyphen_values = true)]
    weight: Option<f64>,
    /// Update added to the weight.
    #[arg(long, requires = "weight", allow_hyphen_values = true)]
    update: Option<f64>,
    /// Simulate Adam steps on this checkpoint instead.
    #[arg(long, conflicts_with = "weight")]
    checkpoint: Option<PathBuf>,
    /// Constant gradient for the simulation.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    gradient: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Precision::PureBf16)]
    precision: Precision,
    #[command(flatten)]
    adam: AdamArgs,
}

#[derive(Debug, Args)]
pub struct AdamsimArgs {
    /// Long near-zero gradient phase followed by unit gradients.
    #[arg(long)]
    adversarial: bool,
    #[arg(long, default_value_t = 100_000)]
    quiet_steps: usize,
    #[arg(long, default_value_t = 1e-20)]
    quiet_value: f64,
    #[arg(long, default_value_t = 50)]
    loud_steps: usize,
    /// Constant gradient when not adversarial.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    gradient: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[command(flatten)]
    adam: AdamArgs,
}

pub fn analyze(cmd: &AnalyzeCommand) -> Result<Report, CliError> {
    match cmd {
        AnalyzeCommand::Absorb(a) => absorb(a),
        AnalyzeCommand::Bound { adam, step } => {
            let cfg = adam.config();
            let h = step.map_or(Horizon::Infinite, Horizon::Step);
            let b = adam_bound(&cfg, h)?;
            let at = step.map_or("t -> inf".to_string(), |t| format!("t = {t}"));
            Ok(Report::new(
                format!("|update| / eta <= {b:.3} ({at})"),
                json!({ "bound": b, "step": step, "beta1": cfg.beta1, "beta2": cfg.beta2 }),
            ))
        }
        AnalyzeCommand::Critical { adam, mode } => {
            let cfg = adam.config();
            let w = critical_weight(&cfg, (*mode).into())?;
            Ok(Report::new(
                format!("critical weight: {w:.2e}"),
                json!({ "critical_weight": w, "mode": CriticalMode::from(*mode), "eta": cfg.eta }),
            ))
        }
        AnalyzeCommand::Frozen { file, adam, mode, threshold } => {
            let c = load(file)?;
            let t = match threshold {
                Some(t) => *t,
                None => critical_weight(&adam.config(), (*mode).into())?,
            };
            let f = frozen_fraction(&c, t)?;
            Ok(Report::new(
                format!("threshold: {t:.3e}\nfrozen fraction: {}", frac(f)),
                json!({ "threshold": t, "frozen_fraction": f }),
            ))
        }
        AnalyzeCommand::Sparsity { prev, curr, k } => {
            let r = sparsity(&load(prev)?, &load(curr)?, *k)?;
            Ok(Report::new(
                format!("sparsity: {} ({} of {} changed, k = {k})", frac(r.sparsity), r.changed, r.total),
                serde_json::to_value(&r).expect("serializable"),
            ))
        }
        AnalyzeCommand::Adamsim(a) => adamsim(a),
    }
}

fn absorb(a: &AbsorbArgs) -> Result<Report, CliError> {
    if let Some(path) = &a.checkpoint {
        let c = load(path)?;
        let precision = match a.precision {
            Precision::PureBf16 => PrecisionMode::PureBf16,
            Precision::Fp32Master => PrecisionMode::Fp32Master,
        };
        let grads = constant_gradients(&c, a.gradient, a.steps);
        let run = simulate_absorbed_updates(&c, &grads, &a.adam.config(), precision)?;
        let lines: Vec<String> = run
            .reports
            .iter()
            .enumerate()
            .map(|(i, r)| format!("step {}: sparsity {} ({} changed)", i + 1, frac(r.sparsity), r.changed))
            .collect();
        return Ok(Report::new(
            lines.join("\n"),
            json!({ "precision": precision, "steps": run.reports }),
        ));
    }
    let w = Bf16::from_f64(a.weight.expect("clap requires --weight"));
    let threshold = absorption_threshold(w);
    let mut text = format!("weight (bf16): {}\nabsorption threshold: {threshold:.3e}", w.to_f64());
    let mut out = json!({ "weight": w.to_f64(), "threshold": threshold });
    if let Some(u) = a.update {
        let absorbed = is_absorbed_exact(w, u);
        text += &format!("\nupdate {u:e}: {}", if absorbed { "absorbed" } else { "applied" });
        out["update"] = json!(u);
        out["absorbed"] = json!(absorbed);
    }
    Ok(Report::new(text, out))
}

fn adamsim(a: &AdamsimArgs) -> Result<Report, CliError> {
    let cfg = a.adam.config();
    let (g, boundary) = if a.adversarial {
        let (g, b) = adversarial_sequence(a.quiet_steps, a.quiet_value, a.loud_steps);
        (g, Some(b))
    } else {
        (vec![a.gradient; a.steps], None)
    };
    let t = simulate_adam_ratio(&g, &cfg, boundary)?;
    let bound = adam_bound(&cfg, Horizon::Infinite)?;
    let mut text = format!("peak ratio: {:.3} at step {}", t.peak, t.peak_index + 1);
    if let Some(after) = t.peak_steps_after_boundary {
        text += &format!(" ({after} steps after the switch)");
    }
    text += &format!("\nasymptotic bound: {bound:.3}\nfinal ratio: {:.3}", t.ratios.last().copied().unwrap_or(0.0));
    Ok(Report::new(
        text,
        json!({
            "peak": t.peak,
            "peak_step": t.peak_index + 1,
            "peak_steps_after_boundary": t.peak_steps_after_boundary,
            "bound": bound,
            "steps": g.len(),
        }),
    ))
}
