//! End-to-end question answering, referring segmentation and evaluation over one scene.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_gaussians, ActivationSource, ClusterSet};
use crate::config::{ActivationMode, RunConfig};
use crate::error::{Error, Result};
use crate::gateway::{
    load_mock_script, read_ledger, Gateway, HttpBackend, HttpConfig, MockBackend, MockScript, ModelTags,
};
use crate::grounding::{
    acc_at_k, frustum_filter, llm_match, miou_3d, normalized_volume, InstanceLabeling, SegmentationResult,
};
use crate::prompts::Prompts;
use crate::refine::{
    answer_with_views, judge_views, perturb_views, verify, AnswerRecord, CandidateSet, InstanceTrace, ViewKind,
    CANDIDATES_PER_INSTANCE,
};
use crate::scene::{load_scene, Camera, CameraRecord, GaussianId, Scene};
use crate::semantic::{
    activate_by_category, activate_by_similarity, extract_evidence_categories, select_text_embeddings, EvidenceQuery,
};
use crate::sidecar::{attach_semantics, read_embedding_matrix, EmbeddingMatrix};
use crate::views::{build_score_matrix, select_initial_views, ScoreMatrix};

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Builds the gateway a configuration asks for: the mock script when one is set,
/// otherwise the HTTP endpoint from the environment. A `.jsonl` mock script is a
/// recorded ledger and replays its exchanges exactly.
pub fn gateway_from_config(config: &RunConfig) -> Result<Gateway> {
    let backend: Box<dyn crate::gateway::ChatBackend> = match &config.mock_script {
        Some(path) if path.extension().is_some_and(|e| e == "jsonl") => {
            Box::new(MockBackend::new(MockScript::from_ledger(&read_ledger(path)?)))
        }
        Some(path) => Box::new(MockBackend::new(load_mock_script(path)?)),
        None => Box::new(HttpBackend::new(HttpConfig::from_env()?)?),
    };
    Ok(Gateway::new(backend, config.gateway_config()).with_tags(ModelTags::from_env()))
}

/// Scene, prompts and parameters of a run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    scene: Scene,
    prompts: Prompts,
    text_embeddings: Option<EmbeddingMatrix>,
    config: RunConfig,
}

/// Evidence, activation, clustering and the initial view per instance.
#[derive(Debug, Clone)]
pub struct Selection {
    pub evidence: EvidenceQuery,
    pub activated: Vec<GaussianId>,
    pub clusters: ClusterSet,
    pub scores: ScoreMatrix,
    /// One camera id per cluster.
    pub initial: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct AnswerRun {
    pub selection: Selection,
    pub candidates: Vec<CandidateSet>,
    pub record: AnswerRecord,
    pub answer_pose: Camera,
}

#[derive(Debug, Clone)]
pub struct SegmentRun {
    pub answer: AnswerRun,
    pub result: SegmentationResult,
}

/// One line of a questions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instance: Option<u32>,
}

/// Parses JSON lines, skipping blank lines.
pub fn parse_questions(text: &str) -> Result<Vec<QuestionItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_questions(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub index: usize,
    pub question: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_match_flagged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Vec<GaussianId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    pub completed: usize,
    pub failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_8: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_frames: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_question: Vec<QuestionReport>,
    pub aggregate: Aggregate,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn all_ok(&self) -> bool {
        self.aggregate.failed == 0
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Means over questions. A failed question scores 0 on every metric its ground truth asks for.
pub fn aggregate(per_question: &[QuestionReport], items: &[QuestionItem]) -> Aggregate {
    let mut matches = Vec::new();
    let mut ious = Vec::new();
    let mut frames = Vec::new();
    for (r, item) in per_question.iter().zip(items) {
        if item.gt_answer.is_some() {
            matches.push(r.llm_match.unwrap_or(0.0));
        }
        if item.gt_instance.is_some() {
            ious.push(r.iou.unwrap_or(0.0));
        }
        if let Some(f) = r.frames {
            frames.push(f as f64);
        }
    }
    let acc = |k| acc_at_k(&ious, k).ok();
    let completed = per_question.iter().filter(|r| r.ok).count();
    Aggregate {
        questions: per_question.len(),
        completed,
        failed: per_question.len() - completed,
        llm_match: mean(&matches),
        miou: mean(&ious),
        acc_5: acc(5.0),
        acc_8: acc(8.0),
        acc_10: acc(10.0),
        average_frames: mean(&frames),
    }
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl Pipeline {
    pub fn new(scene: Scene, prompts: Prompts, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if scene.cameras().is_empty() {
            return Err(Error::Validation("scene has no training cameras".into()));
        }
        Ok(Pipeline {
            scene,
            prompts,
            text_embeddings: None,
            config,
        })
    }

    /// Text embeddings with one row per vocabulary entry.
    pub fn with_text_embeddings(mut self, m: EmbeddingMatrix) -> Result<Self> {
        if m.rows() != self.scene.vocab().len() {
            return Err(Error::Validation(format!(
                "{} text embeddings for a vocabulary of {}",
                m.rows(),
                self.scene.vocab().len()
            )));
        }
        self.text_embeddings = Some(m);
        Ok(self)
    }

    /// Loads scene, cameras, sidecar, vocabulary, text embeddings and prompts named by `config`.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let scene_path = config
            .scene
            .as_deref()
            .ok_or_else(|| Error::Validation("config has no scene".into()))?;
        let camera_path = config
            .cameras
            .as_deref()
            .ok_or_else(|| Error::Validation("config has no cameras".into()))?;
        let mut scene = load_scene(scene_path, camera_path)?;
        if let Some(sidecar) = &config.sidecar {
            scene = attach_semantics(&scene, sidecar)?;
        }
        if let Some(path) = &config.vocab {
            let names = read_vocab(path)?;
            if !scene.vocab().is_empty() && scene.vocab() != names.as_slice() {
                return Err(Error::Validation(format!(
                    "vocabulary in {} differs from the sidecar vocabulary",
                    path.display()
                )));
            }
            scene = scene.with_vocab(names)?;
        }
        let prompts = match &config.prompts {
            Some(dir) => Prompts::load_dir(dir)?,
            None => Prompts::default(),
        };
        let mut p = Pipeline::new(scene, prompts, config.clone())?;
        match &config.text_embeddings {
            Some(path) => p = p.with_text_embeddings(read_embedding_matrix(path)?)?,
            None if config.mode == ActivationMode::Similarity => {
                return Err(Error::Validation("similarity mode needs text_embeddings".into()))
            }
            None => {}
        }
        Ok(p)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prompts(&self) -> &Prompts {
        &self.prompts
    }

    /// Scene name matched against question files.
    pub fn scene_name(&self) -> Option<String> {
        self.config.scene_name.clone().or_else(|| {
            self.config
                .scene
                .as_deref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
        })
    }

    pub fn activate(&self, q: &EvidenceQuery) -> Result<Vec<GaussianId>> {
        match self.config.mode {
            ActivationMode::Category => activate_by_category(&self.scene, q),
            ActivationMode::Similarity => {
                let m = self
                    .text_embeddings
                    .as_ref()
                    .ok_or_else(|| Error::Mode("similarity mode without text embeddings".into()))?;
                let texts = select_text_embeddings(m, q, self.scene.vocab().len())?;
                activate_by_similarity(&self.scene, &texts, self.config.tau, self.config.similarity_rule)
            }
        }
    }

    pub fn cluster(&self, activated: &[GaussianId]) -> Result<ClusterSet> {
        let params = self.config.cluster_params(self.scene.bounds().diagonal());
        let source = match self.config.mode {
            ActivationMode::Category => ActivationSource::Category,
            ActivationMode::Similarity => ActivationSource::Similarity,
        };
        cluster_gaussians(&self.scene, activated, &params, source)
    }

    /// Evidence, activation, clustering, scoring and initial views.
    pub fn select(&self, gateway: &Gateway, question: &str) -> Result<Selection> {
        if self.scene.vocab().is_empty() {
            return Err(Error::Mode("scene has no category vocabulary".into()));
        }
        let evidence = stage(
            "evidence",
            extract_evidence_categories(gateway, &self.prompts, question, self.scene.vocab(), self.config.k),
        )?;
        let activated = stage("activation", self.activate(&evidence))?;
        if activated.is_empty() {
            return Err(Error::Stage {
                stage: "activation",
                source: Box::new(Error::EmptyEvidence(format!(
                    "no gaussian matches {:?}",
                    evidence.names(self.scene.vocab())
                ))),
            });
        }
        let clusters = stage("clustering", self.cluster(&activated))?;
        if clusters.is_empty() {
            return Err(Error::Stage {
                stage: "clustering",
                source: Box::new(Error::NoInstance(format!(
                    "{} activated gaussians form no cluster",
                    activated.len()
                ))),
            });
        }
        let scores = stage(
            "view_scoring",
            build_score_matrix(
                &self.scene,
                &clusters,
                self.config.score_mode,
                &self.config.render_options(),
            ),
        )?;
        let initial = stage("view_scoring", select_initial_views(&scores))?;
        Ok(Selection {
            evidence,
            activated,
            clusters,
            scores,
            initial,
        })
    }

    fn camera(&self, id: u32) -> &Camera {
        self.scene.camera(id).expect("selected camera ids come from the scene")
    }

    /// Full question-answering run.
    pub fn answer(&self, gateway: &Gateway, question: &str) -> Result<AnswerRun> {
        let selection = self.select(gateway, question)?;
        let initial: Vec<Camera> = selection.initial.iter().map(|&id| self.camera(id).clone()).collect();
        let novel = stage(
            "perturbation",
            perturb_views(
                &self.scene,
                &initial,
                &selection.clusters,
                &self.config.perturb_params(),
            ),
        )?;
        let opts = self.config.render_options();
        let candidates = stage(
            "rendering",
            initial
                .iter()
                .enumerate()
                .map(|(l, cam)| CandidateSet::build(&self.scene, l, cam, &novel[4 * l..4 * l + 4], &opts))
                .collect::<Result<Vec<_>>>(),
        )?;
        let judgements = stage(
            "judging",
            candidates
                .iter()
                .map(|c| judge_views(gateway, &self.prompts, c, question))
                .collect::<Result<Vec<_>>>(),
        )?;
        let initial_renders: Vec<Vec<u8>> = candidates.iter().map(|c| c.renders[0].clone()).collect();
        let final_renders: Vec<Vec<u8>> = candidates
            .iter()
            .zip(&judgements)
            .map(|(c, j)| c.renders[j.selected_view_index].clone())
            .collect();
        let initial_answer = stage(
            "answering",
            answer_with_views(gateway, &self.prompts, &initial_renders, question),
        )?;
        let final_answer = stage(
            "answering",
            answer_with_views(gateway, &self.prompts, &final_renders, question),
        )?;
        let verification = stage(
            "verification",
            verify(
                gateway,
                &self.prompts,
                question,
                &initial_answer.text,
                &final_answer.text,
            ),
        )?;

        let (answer_instance, view_index) = if verification.choice == 0 {
            (initial_answer.image_index, 0)
        } else {
            let l = final_answer.image_index;
            (l, judgements[l].selected_view_index)
        };
        let answer_pose = candidates[answer_instance].views[view_index].clone();
        let instances = judgements
            .iter()
            .enumerate()
            .map(|(l, j)| InstanceTrace {
                instance: l,
                size: selection.clusters.clusters[l].len(),
                initial_camera: selection.initial[l],
                per_view_answers: j.per_view_answers.clone(),
                selected_view_index: j.selected_view_index,
                selected_view: ViewKind::ALL[j.selected_view_index],
                selection_fallback: j.fallback,
            })
            .collect();
        debug_assert!(candidates.iter().all(|c| c.views.len() == CANDIDATES_PER_INSTANCE));
        let record = AnswerRecord {
            question: question.to_string(),
            evidence: selection
                .evidence
                .names(self.scene.vocab())
                .into_iter()
                .map(String::from)
                .collect(),
            activated: selection.activated.len(),
            instances,
            novel_poses: novel.len(),
            frames: final_renders.len(),
            initial_answer,
            final_answer,
            verified_answer: verification.verified_answer,
            verification_choice: verification.choice,
            verification_fallback: verification.fallback,
            answer_instance,
            answer_view: ViewKind::ALL[view_index],
            answer_camera: CameraRecord::from(&answer_pose),
        };
        Ok(AnswerRun {
            selection,
            candidates,
            record,
            answer_pose,
        })
    }

    /// Answer run followed by frustum filtering of the activated set in the answer view.
    /// IoU is computed when ground-truth ids are given.
    pub fn segment(&self, gateway: &Gateway, question: &str, gt: Option<&[GaussianId]>) -> Result<SegmentRun> {
        let answer = self.answer(gateway, question)?;
        let predicted = stage(
            "segmentation",
            frustum_filter(&self.scene, &answer.selection.activated, &answer.answer_pose),
        )?;
        let iou = match gt {
            Some(gt) => Some(stage(
                "segmentation",
                normalized_volume(&self.scene).and_then(|w| miou_3d(&predicted, gt, &w)),
            )?),
            None => None,
        };
        let result = SegmentationResult {
            predicted,
            answer_camera: CameraRecord::from(&answer.answer_pose),
            iou,
        };
        Ok(SegmentRun { answer, result })
    }

    fn evaluate_one(
        &self,
        gateway: &Gateway,
        index: usize,
        item: &QuestionItem,
        labels: Option<&InstanceLabeling>,
    ) -> Result<QuestionReport> {
        if let (Some(want), Some(have)) = (&item.scene, self.scene_name()) {
            if *want != have {
                return Err(Error::Validation(format!(
                    "question targets scene {want:?}, loaded scene is {have:?}"
                )));
            }
        }
        let gt = match (item.gt_instance, labels) {
            (Some(inst), Some(lab)) => Some(lab.members(inst)),
            (Some(_), None) => {
                return Err(Error::Validation(
                    "question has gt_instance but no instance labels are loaded".into(),
                ))
            }
            _ => None,
        };
        let run = self.segment(gateway, &item.question, gt.as_deref())?;
        let record = &run.answer.record;
        let matched = match &item.gt_answer {
            Some(gt_answer) => Some(stage(
                "llm_match",
                llm_match(
                    gateway,
                    &self.prompts,
                    &record.verified_answer,
                    gt_answer,
                    &item.question,
                ),
            )?),
            None => None,
        };
        Ok(QuestionReport {
            index,
            question: item.question.clone(),
            ok: true,
            error_kind: None,
            error: None,
            answer: Some(record.verified_answer.clone()),
            frames: Some(record.frames),
            llm_match: matched.map(|m| m.score),
            llm_match_flagged: matched.map(|m| m.flagged),
            iou: run.result.iou,
            predicted: Some(run.result.predicted),
        })
    }

    /// Runs every question in order. Failures are recorded per question and never stop the run.
    pub fn evaluate(
        &self,
        gateway: &Gateway,
        items: &[QuestionItem],
        labels: Option<&InstanceLabeling>,
    ) -> EvaluationReport {
        let per_question: Vec<QuestionReport> = items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                self.evaluate_one(gateway, i, item, labels).unwrap_or_else(|e| {
                    log::warn!("question {i} failed: {e}");
                    QuestionReport {
                        index: i,
                        question: item.question.clone(),
                        ok: false,
                        error_kind: Some(e.kind().to_string()),
                        error: Some(e.to_string()),
                        answer: None,
                        frames: None,
                        llm_match: None,
                        llm_match_flagged: None,
                        iou: None,
                        predicted: None,
                    }
                })
            })
            .collect();
        let aggregate = aggregate(&per_question, items);
        EvaluationReport {
            per_question,
            aggregate,
        }
    }
}
