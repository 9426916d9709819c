use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use softseq::arm::{enforce_terminal, policy_of};
use softseq::bijection::{elbo, kl_bound_check, map_q_to_r, map_r_to_q, verify_bijection, Check};
use softseq::dist;
use softseq::ebm::{best_path, log_partition_bruteforce, log_partition_dp};
use softseq::io::{write_samples, write_soft_values_csv, Document};
use softseq::train::{
    make_normal_softargmax, make_zipfian, train_arm, train_ebm, DataDistribution, OptimalEbm, RunRecord,
    TrainConfig,
};
use softseq::{LogitTable, PrefixTree, RandomStream, RewardTable};

use crate::config::{
    ConvertParams, Loaded, Model, ModelSource, PartitionParams, SampleParams, TableSource, TargetSpec,
    TrainParams, VerifyParams,
};
use crate::error::{CliError, CliResult};
use crate::output::{OutDir, TIMING};

pub struct Context {
    pub loaded: Loaded,
    pub budget: usize,
}

enum ModelTable {
    Rewards(RewardTable),
    Logits(LogitTable),
}

impl Context {
    fn tree(&self) -> CliResult<PrefixTree> {
        Ok(PrefixTree::with_budget(self.loaded.space()?, self.budget)?)
    }

    fn document(&self, path: &Path, tree: &PrefixTree) -> CliResult<Document> {
        let path = self.loaded.resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let doc = Document::from_json(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if doc.space != *tree.spec() {
            return Err(CliError::Schema(format!(
                "{}: space {:?} differs from the config space {:?}",
                path.display(),
                doc.space,
                tree.spec()
            )));
        }
        Ok(doc)
    }

    fn rewards(&self, source: &TableSource, tree: &PrefixTree) -> CliResult<RewardTable> {
        match source {
            TableSource::Random(spec) => {
                let mut rng = RandomStream::new(spec.seed, 0).rng();
                if spec.forbid_prob > 0.0 {
                    Ok(RewardTable::random_with_forbidden(tree, &mut rng, spec.scale, spec.forbid_prob))
                } else {
                    Ok(RewardTable::random(tree, &mut rng, spec.scale))
                }
            }
            TableSource::File(path) => Ok(self.document(path, tree)?.into_reward(self.budget)?),
        }
    }

    fn logits(&self, source: &TableSource, tree: &PrefixTree) -> CliResult<LogitTable> {
        match source {
            TableSource::Random(spec) => {
                if spec.forbid_prob != 0.0 {
                    return Err(CliError::Schema("forbid_prob applies to reward tables only".into()));
                }
                // dangling entries masked so the table defines a valid policy
                let q = LogitTable::random(tree, &mut RandomStream::new(spec.seed, 0).rng(), spec.scale);
                Ok(enforce_terminal(&q))
            }
            TableSource::File(path) => Ok(self.document(path, tree)?.into_logits(self.budget)?),
        }
    }

    fn model(&self, source: &ModelSource, tree: &PrefixTree) -> CliResult<ModelTable> {
        match source {
            ModelSource::Rewards(s) => Ok(ModelTable::Rewards(self.rewards(s, tree)?)),
            ModelSource::Logits(s) => Ok(ModelTable::Logits(self.logits(s, tree)?)),
        }
    }
}

fn json_doc(doc: softseq::Result<Document>) -> CliResult<Vec<u8>> {
    let mut text = doc?.to_json_pretty();
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn convert(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: ConvertParams = ctx.loaded.params()?;
    let tree = ctx.tree()?;
    let mut dir = OutDir::create(out)?;
    match ctx.model(&params.source, &tree)? {
        ModelTable::Rewards(r) => {
            let q = map_r_to_q(&r);
            let policy = policy_of(&q)?;
            dir.write("logits.json", &json_doc(Document::from_logits(&q))?)?;
            dir.write("policy.json", &json_doc(Document::from_policy(&policy))?)?;
        }
        ModelTable::Logits(q) => {
            dir.write("rewards.json", &json_doc(Document::from_reward(&map_q_to_r(&q)))?)?;
        }
    }
    dir.finish()
}

#[derive(Serialize)]
struct BestPath {
    tokens: Vec<usize>,
    score: f64,
}

#[derive(Serialize)]
struct PartitionSummary {
    log_partition: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_partition_bruteforce: Option<f64>,
    best_path: BestPath,
}

pub fn partition(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: PartitionParams = ctx.loaded.params()?;
    let tree = ctx.tree()?;
    let r = ctx.rewards(&params.rewards, &tree)?;
    let values = log_partition_dp(&r);
    let (tokens, score) = best_path(&r)?;
    let summary = PartitionSummary {
        log_partition: values.root,
        log_partition_bruteforce: params.bruteforce.then(|| log_partition_bruteforce(&r)),
        best_path: BestPath { tokens, score },
    };
    let mut csv = Vec::new();
    write_soft_values_csv(&mut csv, &tree, &values).expect("writing to memory");
    let mut dir = OutDir::create(out)?;
    dir.write_json("partition.json", &summary)?;
    dir.write("soft_values.csv", &csv)?;
    dir.finish()
}

pub fn sample(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: SampleParams = ctx.loaded.params()?;
    let tree = ctx.tree()?;
    let q = match ctx.model(&params.source, &tree)? {
        ModelTable::Rewards(r) => map_r_to_q(&r),
        ModelTable::Logits(q) => q,
    };
    let policy = policy_of(&q)?;
    let samples = dist::sample(&policy, RandomStream::new(params.seed, params.stream_id), params.n);
    let mut lines = Vec::new();
    write_samples(&mut lines, &samples).expect("writing to memory");
    let mut dir = OutDir::create(out)?;
    dir.write("samples.jsonl", &lines)?;
    dir.finish()
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    checks: Vec<Check>,
}

pub fn verify(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: VerifyParams = ctx.loaded.params()?;
    if !(params.tolerance >= 0.0) {
        return Err(CliError::Schema("tolerance must be non-negative".into()));
    }
    let tree = ctx.tree()?;
    let r = ctx.rewards(&params.rewards, &tree)?;
    let mut checks = verify_bijection(&r, params.tolerance).checks;
    let q = map_r_to_q(&r);
    let optimum = elbo(&r, &q)?;
    checks.push(Check::at_most("elbo_gap", optimum.gap.abs(), params.tolerance));
    if let Some(noise) = params.noise {
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(CliError::Schema("noise must be a finite non-negative number".into()));
        }
        let mut rng = RandomStream::new(params.noise_seed, 0).rng();
        let eps: LogitTable = LogitTable::random(&tree, &mut rng, noise);
        let noisy = LogitTable::new(q.map(|s, a, v| v + eps.get(s, a)));
        let (kl, bound) = kl_bound_check(&r, &noisy)?;
        checks.push(Check::at_most("kl_bound_excess", kl - bound, params.tolerance));
        let perturbed = elbo(&r, &noisy)?;
        checks.push(Check::at_most("elbo_gap_negative", -perturbed.gap, params.tolerance));
    }
    let report = VerifyReport {
        passed: checks.iter().all(|c| c.pass),
        checks,
    };
    let mut dir = OutDir::create(out)?;
    dir.write_json("verify.json", &report)?;
    dir.finish()?;
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        return Err(CliError::Verification(failed.join(", ")));
    }
    Ok(())
}

/// File stem of the CSV written for one run, e.g. `ebm_1e-3`.
pub fn run_name(model: Model, step_size: f64) -> String {
    let prefix = match model {
        Model::Ebm => "ebm",
        Model::Arm => "arm",
    };
    format!("{prefix}_{step_size:e}")
}

#[derive(Serialize)]
struct RunSummary {
    run: String,
    step_size: f64,
    steps: usize,
    converged: bool,
    final_risk: f64,
    final_gap: f64,
    min_risk: f64,
    final_step_size: f64,
}

fn summarize(name: String, step_size: f64, record: &RunRecord, min_risk: f64) -> RunSummary {
    let last = record.last().expect("a run records its initial row");
    RunSummary {
        run: name,
        step_size,
        steps: last.step,
        converged: record.converged,
        final_risk: last.risk,
        final_gap: last.gap,
        min_risk,
        final_step_size: record.final_step_size,
    }
}

pub fn train(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: TrainParams = ctx.loaded.params()?;
    if params.step_sizes.is_empty() {
        return Err(CliError::Schema("step_sizes must list at least one step size".into()));
    }
    if params.models.is_empty() {
        return Err(CliError::Schema("models must not be empty".into()));
    }
    let tree = ctx.tree()?;
    let rho: DataDistribution = match params.target {
        TargetSpec::Zipfian { exponent } => make_zipfian(&tree, exponent)?,
        TargetSpec::NormalSoftargmax { temperature, seed } => {
            make_normal_softargmax(&tree, temperature, RandomStream::new(seed, 0))?
        }
    };
    let min_risk = softseq::train::min_risk(&rho);
    let mut dir = OutDir::create(out)?;
    let mut summaries = Vec::new();
    let mut timing = serde_json::Map::new();
    for &step_size in &params.step_sizes {
        let cfg = TrainConfig {
            step_size,
            max_steps: params.max_steps,
            gap_tolerance: params.gap_tolerance,
            eval_every: params.eval_every,
            init: params.init,
            preconditioner: params.preconditioner,
        };
        cfg.validate()?;
        let mut reference = None;
        for model in [Model::Ebm, Model::Arm] {
            if !params.models.contains(&model) {
                continue;
            }
            let name = run_name(model, step_size);
            let started = Instant::now();
            let record = match model {
                Model::Ebm => {
                    let (r, record) = train_ebm(&rho, &cfg)?;
                    reference = Some(OptimalEbm::new(r));
                    record
                }
                Model::Arm => train_arm(&rho, &cfg, reference.as_ref())?.1,
            };
            timing.insert(name.clone(), started.elapsed().as_secs_f64().into());
            let mut csv = Vec::new();
            record.write_csv(&mut csv).expect("writing to memory");
            dir.write(&format!("{name}.csv"), &csv)?;
            summaries.push(summarize(name, step_size, &record, min_risk));
        }
    }
    dir.write_json("runs.json", &summaries)?;
    let mut text = serde_json::to_string_pretty(&timing).expect("timing serializes");
    text.push('\n');
    dir.write_volatile(TIMING, text.as_bytes())?;
    dir.finish()
}
