use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dha_core::analysis::{head_similarity_matrix, layer_redundancy};
use dha_core::attention::{HeadKind, ModelConfig};
use dha_core::checkpoint::{load_checkpoint, save_checkpoint};
use dha_core::task::{SyntheticLmTask, TaskConfig};
use dha_core::training::{
    budget_of, compare_inits, model_kv_bytes, train_mha_baseline, train_planted_mha,
    FusionSettings, PhaseMetrics, PipelineConfig, PipelineOutput, TrainConfig,
};
use dha_core::ToyModel64;

use crate::report::{self, RedundancyRow, Summary};
use crate::{Cli, Command, PipelineArgs, TrainArgs};

const EVAL_SEQS: usize = 32;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBaseline(args) => train_baseline(cli, args),
        Command::Analyze { checkpoint } => analyze(cli, checkpoint),
        Command::Transform(args) => transform(cli, args),
        Command::Compare(args) => compare(cli, args),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;
    Ok(&cli.out)
}

/// The synthetic task a model of this shape trains on.
fn task_for(config: &ModelConfig, task_seed: u64) -> Result<SyntheticLmTask> {
    Ok(SyntheticLmTask::new(TaskConfig {
        vocab_size: config.vocab_size,
        seq_len: config.max_seq,
        seed: task_seed,
        ..TaskConfig::default()
    })?)
}

fn train_baseline(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let config = ModelConfig::new(
        args.layers,
        args.heads,
        args.head_dim,
        args.vocab,
        args.seq_len,
    )?;
    let task = task_for(&config, cli.task_seed)?;
    let tc = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: cli.seed,
        eval_every: args.eval_every,
        eval_seqs: EVAL_SEQS,
    };
    tc.validate()?;
    let out = out_dir(cli)?;
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("baseline.dha"));

    let trained = match args.planted_groups {
        Some(g) => train_planted_mha::<f64>(&task, config, g, &tc)?,
        None => train_mha_baseline::<f64>(&task, config, &tc)?,
    };
    save_checkpoint(&trained.model, None, &path)?;
    report::write_loss_curve(&out.join("baseline_curve.csv"), &trained.curve)?;
    report::write_metrics(
        &out.join("metrics.json"),
        &[PhaseMetrics {
            phase: "baseline".into(),
            steps: args.steps,
            lm_loss: trained.final_val_loss,
            fusion_loss: None,
            kv_bytes: model_kv_bytes(&trained.model),
            params: trained.model.n_params(),
        }],
    )?;
    println!(
        "final validation loss {:.6} (chain entropy {:.6}, uniform {:.6})",
        trained.final_val_loss,
        task.oracle_loss(),
        (config.vocab_size as f64).ln()
    );
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn analyze(cli: &Cli, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint::<f64>(checkpoint)
        .with_context(|| format!("cannot load {}", checkpoint.display()))?;
    let out = out_dir(cli)?;
    let sim_dir = out.join("similarity");
    fs::create_dir_all(&sim_dir)?;
    let attn = &ck.model.attn;
    let mut rows = Vec::with_capacity(attn.layers.len());
    for l in 0..attn.layers.len() {
        let mut red = [None; 3];
        for (slot, kind) in [HeadKind::Query, HeadKind::Key, HeadKind::Value]
            .into_iter()
            .enumerate()
        {
            let sim = head_similarity_matrix(attn, l, kind)?;
            report::write_matrix_csv(
                &sim_dir.join(format!("layer{l}_{}.csv", kind.short())),
                &sim.values,
            )?;
            // a kind with a single head (after fusion) has no pairs
            red[slot] = (sim.size() >= 2)
                .then(|| layer_redundancy(&sim))
                .transpose()?;
        }
        println!(
            "layer {l}: redundancy q {} k {} v {}",
            fmt_opt(red[0]),
            fmt_opt(red[1]),
            fmt_opt(red[2])
        );
        rows.push(RedundancyRow {
            layer: l,
            q: red[0],
            k: red[1],
            v: red[2],
        });
    }
    report::write_redundancy_csv(&out.join("redundancy.csv"), &rows)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// `"0.25"` is a fraction of the MHA key+value head total; `"24"` is a head
/// count.
fn parse_budget(s: &str, config: &ModelConfig) -> Result<usize> {
    let full = 2 * config.n_layers * config.n_query_heads;
    let v: f64 = s
        .trim()
        .parse()
        .with_context(|| format!("KV budget {s:?} is not a number"))?;
    if s.contains('.') || v <= 1.0 {
        if !(v > 0.0 && v <= 1.0) {
            bail!("KV budget fraction {v} must be in (0, 1]");
        }
        let heads = v * full as f64;
        if (heads - heads.round()).abs() > 1e-9 || heads.round() < 1.0 {
            bail!("KV budget {v} of {full} heads is not a whole number of heads");
        }
        Ok(heads.round() as usize)
    } else {
        if v.fract() != 0.0 {
            bail!("KV budget {v} must be a whole head count");
        }
        Ok(v as usize)
    }
}

fn load_mha(args: &PipelineArgs) -> Result<ToyModel64> {
    let ck = load_checkpoint::<f64>(&args.checkpoint)
        .with_context(|| format!("cannot load {}", args.checkpoint.display()))?;
    Ok(ck.model)
}

fn pipeline_config(cli: &Cli, args: &PipelineArgs, config: &ModelConfig) -> Result<PipelineConfig> {
    let mut pc = PipelineConfig::new(parse_budget(&args.kv_budget, config)?);
    pc.search_steps = args.search_steps;
    pc.score_mode = args.score_mode;
    pc.baseline = args.baseline;
    pc.seed = cli.seed;
    pc.fusion = FusionSettings {
        max_steps: args.fusion_steps,
        margin_base: args.margin_base,
        warmup_steps: args.warmup,
        lr_model: args.lr_model,
        lr_fusion: args.lr_fusion,
        lr_lambda: args.lr_lambda,
        batch_size: args.batch_size,
        seed: cli.seed,
        ..FusionSettings::default()
    };
    pc.ct = TrainConfig {
        steps: args.ct_steps,
        batch_size: args.batch_size,
        lr: args.lr_model,
        seed: cli.seed.wrapping_add(1),
        eval_every: args.eval_every,
        eval_seqs: EVAL_SEQS,
    };
    pc.validate(config)?;
    Ok(pc)
}

fn write_pipeline(
    out: &Path,
    prefix: &str,
    pc: &PipelineConfig,
    run: &PipelineOutput<f64>,
) -> Result<Summary> {
    let name = |s: &str| out.join(format!("{prefix}{s}"));
    let ckpt = format!("{prefix}model.dha");
    save_checkpoint(&run.model, None, &out.join(&ckpt))?;
    save_checkpoint(&run.initial, None, &name("initial.dha"))?;
    if let Some(search) = &run.search {
        report::write_search(out, search, pc.score_mode, pc.search_steps)?;
    }
    if let Some(fusion) = &run.fusion {
        report::write_fusion_trace(&name("fusion_trace.csv"), &fusion.trace)?;
    }
    report::write_loss_curve(&name("ct_curve.csv"), &run.ct.curve)?;
    report::write_metrics(&name("metrics.json"), &run.metrics)?;
    let budget = budget_of(&run.model);
    let loss_of = |phases: &[&str]| {
        run.metrics
            .iter()
            .find(|m| phases.contains(&m.phase.as_str()))
            .map_or(f64::NAN, |m| m.lm_loss)
    };
    let summary = Summary {
        baseline: pc.baseline,
        seed: pc.seed,
        kv_budget_total: pc.kv_budget_total,
        key_heads: budget.key_heads,
        value_heads: budget.value_heads,
        kv_cache_bytes_before: run.kv_bytes_before,
        kv_cache_bytes_after: run.kv_bytes_after,
        kv_ratio: run.kv_bytes_after as f64 / run.kv_bytes_before as f64,
        fusion_status: run.fusion.as_ref().map(|f| f.status),
        fusion_steps: run.fusion.as_ref().map(|f| f.steps),
        mha_val_loss: loss_of(&["mha"]),
        initial_val_loss: loss_of(&["materialize", "pool"]),
        final_val_loss: loss_of(&["ct"]),
        checkpoint: ckpt,
    };
    report::write_json(&name("summary.json"), &summary)?;
    Ok(summary)
}

fn transform(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let mha = load_mha(args)?;
    let task = task_for(&mha.config, cli.task_seed)?;
    let pc = pipeline_config(cli, args, &mha.config)?;
    let out = out_dir(cli)?;
    let run = dha_core::training::transform_pipeline(&mha, &task, &pc)?;
    let s = write_pipeline(out, "", &pc, &run)?;
    println!(
        "key heads {:?}, value heads {:?}; KV cache {} -> {} bytes (ratio {})",
        s.key_heads, s.value_heads, s.kv_cache_bytes_before, s.kv_cache_bytes_after, s.kv_ratio
    );
    if let (Some(status), Some(steps)) = (s.fusion_status, s.fusion_steps) {
        println!("fusion: {status:?} after {steps} steps");
    }
    println!(
        "validation loss: mha {:.6}, initial {:.6}, after training {:.6}",
        s.mha_val_loss, s.initial_val_loss, s.final_val_loss
    );
    Ok(())
}

fn compare(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let mha = load_mha(args)?;
    let task = task_for(&mha.config, cli.task_seed)?;
    let pc = pipeline_config(cli, args, &mha.config)?;
    let out = out_dir(cli)?;
    let cmp = compare_inits(&mha, &task, &pc)?;
    write_pipeline(out, "dha_", &pc, &cmp.dha)?;
    write_pipeline(out, "gqa_", &pc, &cmp.gqa)?;
    report::write_compare_csv(&out.join("compare.csv"), &cmp.points)?;
    for p in &cmp.points {
        let verdict = if p.dha_loss < p.gqa_loss {
            "dha lower"
        } else if p.gqa_loss < p.dha_loss {
            "gqa lower"
        } else {
            "tie"
        };
        println!(
            "step {:>6}: dha {:.6} gqa {:.6} {verdict}",
            p.step, p.dha_loss, p.gqa_loss
        );
    }
    let wins = cmp
        .points
        .iter()
        .filter(|p| p.dha_loss < p.gqa_loss)
        .count();
    println!("dha lower at {wins}/{} checkpoints", cmp.points.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_fractions_and_counts() {
        let cfg = ModelConfig::new(4, 8, 8, 64, 128).unwrap();
        assert_eq!(parse_budget("0.25", &cfg).unwrap(), 16);
        assert_eq!(parse_budget("0.5", &cfg).unwrap(), 32);
        assert_eq!(parse_budget("1", &cfg).unwrap(), 64);
        assert_eq!(parse_budget("24", &cfg).unwrap(), 24);
        assert!(parse_budget("0.3", &cfg).is_err());
        assert!(parse_budget("0", &cfg).is_err());
        assert!(parse_budget("1.5", &cfg).is_err());
        assert!(parse_budget("half", &cfg).is_err());
    }
}
