//! Four-stage alternation: (i) flow pre-training from scratch, (ii)
//! detection from (i)'s backbone, (iii) flow with the backbone of (ii) and
//! the flow head of (i), (iv) detection with the backbone of (iii) and the
//! detection head of (ii).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{apply_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::train::{fresh_params, train_detection, train_flow, SceneSource, StageOutcome};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::Namespace;

pub const STAGE_TAGS: [&str; 4] = [
    "stage1-flow",
    "stage2-detect",
    "stage3-flow",
    "stage4-detect",
];

/// One namespace of a stage's initial parameters compared against the
/// stage output it must come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub namespace: String,
    pub source_stage: String,
    pub expected: String,
    pub actual: String,
}

impl AuditEntry {
    pub fn ok(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug)]
pub struct AlternateOutcome {
    pub stages: Vec<StageOutcome>,
    pub audit: Vec<AuditEntry>,
}

impl AlternateOutcome {
    pub fn audit_passed(&self) -> bool {
        self.audit.len() == 5 && self.audit.iter().all(AuditEntry::ok)
    }

    pub fn final_params(&self) -> &ModelParams<f32> {
        &self.stages[3].best
    }
}

fn stage_checkpoint(out: &Path, k: usize) -> PathBuf {
    out.join(STAGE_TAGS[k]).join("best.fsck")
}

fn load_stage(out: &Path, k: usize) -> Result<Checkpoint> {
    let path = stage_checkpoint(out, k);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing checkpoint of stage {} ({}) at {}",
            k + 1,
            STAGE_TAGS[k],
            path.display()
        )));
    }
    Checkpoint::load(&path).map_err(|e| Error::Checkpoint(format!("stage {} ({}): {e}", k + 1, STAGE_TAGS[k])))
}

/// Builds a stage's initial parameters from earlier stage checkpoints and
/// records the wiring hashes.
fn wire(
    run: &RunConfig,
    out: &Path,
    stage: usize,
    sources: &[(Namespace, usize)],
    audit: &mut Vec<AuditEntry>,
) -> Result<ModelParams<f32>> {
    let mut params = fresh_params(run)?;
    for &(ns, k) in sources {
        let ck = load_stage(out, k)?;
        apply_checkpoint(&ck, &mut params, &[ns])?;
        audit.push(AuditEntry {
            stage: STAGE_TAGS[stage].to_string(),
            namespace: ns.prefix().to_string(),
            source_stage: STAGE_TAGS[k].to_string(),
            expected: ck.params.namespace_hash(ns),
            actual: params.namespace_hash(ns),
        });
    }
    Ok(params)
}

pub fn alternate_train(run: &RunConfig) -> Result<AlternateOutcome> {
    run.validate()?;
    let source = SceneSource::from_config(&run.data)?;
    let out = run.out_dir.as_path();
    let mut audit = Vec::new();
    let mut stages = Vec::with_capacity(4);

    let p1 = fresh_params(run)?;
    stages.push(train_flow(p1, run, &source, out, STAGE_TAGS[0])?);

    let p2 = wire(run, out, 1, &[(Namespace::Backbone, 0)], &mut audit)?;
    stages.push(train_detection(p2, run, &source, out, STAGE_TAGS[1])?);

    let p3 = wire(run, out, 2, &[(Namespace::Backbone, 1), (Namespace::Flow, 0)], &mut audit)?;
    stages.push(train_flow(p3, run, &source, out, STAGE_TAGS[2])?);

    let p4 = wire(run, out, 3, &[(Namespace::Backbone, 2), (Namespace::Detect, 1)], &mut audit)?;
    stages.push(train_detection(p4, run, &source, out, STAGE_TAGS[3])?);

    for a in &audit {
        let mark = if a.ok() { "ok" } else { "MISMATCH" };
        log::info!(
            "audit {} {}.* from {}: {mark} ({})",
            a.stage,
            a.namespace,
            a.source_stage,
            &a.actual[..12]
        );
    }
    let outcome = AlternateOutcome { stages, audit };
    if !outcome.audit_passed() {
        return Err(Error::Checkpoint("stage wiring audit failed".into()));
    }
    Ok(outcome)
}
