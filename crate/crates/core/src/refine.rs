//! Novel-view candidates around the initial views, VLM judging of the candidates,
//! multi-view answering and the final initial-vs-adjusted verification.

use std::sync::OnceLock;

use nalgebra::Vector3;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSet;
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway};
use crate::prompts::{Prompts, REPROMPT_ANSWER, REPROMPT_INDEX};
use crate::render::{render_with, RenderOptions};
use crate::scene::{Camera, CameraRecord, Scene};

pub const CANDIDATES_PER_INSTANCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Initial,
    Left,
    Right,
    ZoomIn,
    ZoomOut,
}

impl ViewKind {
    pub const ALL: [ViewKind; CANDIDATES_PER_INSTANCE] = [
        ViewKind::Initial,
        ViewKind::Left,
        ViewKind::Right,
        ViewKind::ZoomIn,
        ViewKind::ZoomOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Initial => "initial",
            ViewKind::Left => "left",
            ViewKind::Right => "right",
            ViewKind::ZoomIn => "zoom_in",
            ViewKind::ZoomOut => "zoom_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbParams {
    /// Lateral shift as a fraction of the camera-to-centroid distance.
    pub shift: f64,
    /// Dolly step as a fraction of the camera-to-centroid distance.
    pub dolly: f64,
    /// Zoom by scaling focal lengths instead of moving the camera.
    pub focal_zoom: bool,
}

impl Default for PerturbParams {
    fn default() -> Self {
        PerturbParams {
            shift: 0.15,
            dolly: 0.25,
            focal_zoom: false,
        }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::Validation(format!(
                "shift fraction {} must be finite and >= 0",
                self.shift
            )));
        }
        if !(0.0..1.0).contains(&self.dolly) {
            return Err(Error::Validation(format!(
                "dolly fraction {} must lie in [0, 1)",
                self.dolly
            )));
        }
        Ok(())
    }
}

/// Left, right, zoom-in and zoom-out variants of `cam` relative to `target`.
/// Orientation never changes. Intrinsics only change under focal zoom.
pub fn perturb_pose(cam: &Camera, target: &Vector3<f64>, params: &PerturbParams) -> [Camera; 4] {
    let center = cam.center();
    let to_target = target - center;
    let d = to_target.norm();
    if d < 1e-6 {
        log::warn!(
            "camera {} sits on its target; perturbations replaced by the initial pose",
            cam.id
        );
        return [cam.clone(), cam.clone(), cam.clone(), cam.clone()];
    }
    let lateral = cam.right_axis() * (params.shift * d);
    let left = cam.with_center(&(center - lateral));
    let right = cam.with_center(&(center + lateral));
    let (zoom_in, zoom_out) = if params.focal_zoom {
        let scaled = |m: f64| Camera {
            fx: cam.fx * m,
            fy: cam.fy * m,
            ..cam.clone()
        };
        (scaled(1.0 / (1.0 - params.dolly)), scaled(1.0 / (1.0 + params.dolly)))
    } else {
        let step = to_target * params.dolly;
        (cam.with_center(&(center + step)), cam.with_center(&(center - step)))
    };
    [left, right, zoom_in, zoom_out]
}

/// `4 L` novel poses, four per initial view in [`ViewKind`] order.
pub fn perturb_views(
    scene: &Scene,
    initial: &[Camera],
    clusters: &ClusterSet,
    params: &PerturbParams,
) -> Result<Vec<Camera>> {
    params.validate()?;
    if initial.len() != clusters.len() {
        return Err(Error::Validation(format!(
            "{} initial views for {} clusters",
            initial.len(),
            clusters.len()
        )));
    }
    Ok(initial
        .iter()
        .enumerate()
        .flat_map(|(l, cam)| perturb_pose(cam, &clusters.centroid(scene, l), params))
        .collect())
}

/// The initial view of one instance plus its four perturbations, with full-scene renders.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub instance: usize,
    pub views: Vec<Camera>,
    /// PNG-encoded color renders, parallel to `views`.
    pub renders: Vec<Vec<u8>>,
}

impl CandidateSet {
    pub fn build(
        scene: &Scene,
        instance: usize,
        initial: &Camera,
        novel: &[Camera],
        opts: &RenderOptions,
    ) -> Result<Self> {
        if novel.len() != CANDIDATES_PER_INSTANCE - 1 {
            return Err(Error::Validation(format!("{} novel poses, expected 4", novel.len())));
        }
        let views: Vec<Camera> = std::iter::once(initial.clone()).chain(novel.iter().cloned()).collect();
        let renders = views
            .par_iter()
            .map(|cam| render_with(scene, cam, None, opts).map(|b| b.color_png()))
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidateSet {
            instance,
            views,
            renders,
        })
    }
}

fn first_index(reply: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\d+").unwrap());
    re.find(reply).and_then(|m| m.as_str().parse().ok())
}

/// Sends `req`; if `parse` rejects the reply, resends once with `suffix` appended.
/// Returns the parsed value (if any) and the last reply text.
fn chat_with_reprompt<T>(
    gateway: &Gateway,
    mut req: ChatRequest,
    suffix: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(Option<T>, String)> {
    let reply = gateway.chat(&req)?.text;
    if let Some(v) = parse(&reply) {
        return Ok((Some(v), reply));
    }
    req.content_text.push_str(suffix);
    let reply = gateway.chat(&req)?.text;
    Ok((parse(&reply), reply))
}

/// Index in `0..n` from a reply, with one reprompt and a fallback to 0.
/// The flag is true when the fallback was used.
fn ask_index(gateway: &Gateway, req: ChatRequest, n: usize, what: &str) -> Result<(usize, bool)> {
    let (idx, reply) = chat_with_reprompt(gateway, req, REPROMPT_INDEX, |r| first_index(r).filter(|&i| i < n))?;
    match idx {
        Some(i) => Ok((i, false)),
        None => {
            log::warn!("{what}: no valid index in {reply:?}; using 0");
            Ok((0, true))
        }
    }
}

/// Outcome of judging one instance's candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub per_view_answers: Vec<String>,
    pub selected_view_index: usize,
    pub fallback: bool,
}

/// One visual-QA call per candidate render, then a selection call over the five answers.
pub fn judge_views(gateway: &Gateway, prompts: &Prompts, cands: &CandidateSet, question: &str) -> Result<Judgement> {
    let answers = cands
        .renders
        .par_iter()
        .map(|png| {
            let req = ChatRequest::text(prompts.system(), prompts.visual_qa(question, 1), &gateway.tags().vqa)
                .with_images(vec![png.clone()]);
            gateway.chat(&req).map(|r| r.text.trim().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let req = ChatRequest::text(
        prompts.system(),
        prompts.view_selection(question, &answers),
        &gateway.tags().selection,
    );
    let (selected, fallback) = ask_index(gateway, req, answers.len(), "view selection")?;
    Ok(Judgement {
        per_view_answers: answers,
        selected_view_index: selected,
        fallback,
    })
}

/// Parses `Image i` followed by the answer; the separator may be a newline or a literal `\n`.
pub fn parse_image_answer(reply: &str, n_images: usize) -> Option<(usize, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?is)^[\s*#]*image\s*(\d+)[\s*]*(?:\\n)?[\s:.\-]*(.*)$").unwrap());
    let caps = re.captures(reply)?;
    let idx: usize = caps[1].parse().ok()?;
    if idx >= n_images {
        return None;
    }
    Some((idx, caps[2].trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewAnswer {
    pub image_index: usize,
    pub text: String,
    pub format_ok: bool,
}

/// One call carrying every render. A reply that breaks the `Image i` format twice is
/// kept verbatim with image index 0.
pub fn answer_with_views(
    gateway: &Gateway,
    prompts: &Prompts,
    renders: &[Vec<u8>],
    question: &str,
) -> Result<ViewAnswer> {
    if renders.is_empty() {
        return Err(Error::Validation("answering needs at least one view".into()));
    }
    let req = ChatRequest::text(
        prompts.system(),
        prompts.answer(question, renders.len()),
        &gateway.tags().vqa,
    )
    .with_images(renders.to_vec());
    let (parsed, reply) = chat_with_reprompt(gateway, req, REPROMPT_ANSWER, |r| parse_image_answer(r, renders.len()))?;
    Ok(match parsed {
        Some((image_index, text)) => ViewAnswer {
            image_index,
            text,
            format_ok: true,
        },
        None => {
            log::warn!("answer reply {reply:?} lacks the Image i prefix; using image 0");
            ViewAnswer {
                image_index: 0,
                text: reply.trim().to_string(),
                format_ok: false,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    /// 0 = initial-view answer, 1 = adjusted-view answer.
    pub choice: usize,
    pub verified_answer: String,
    pub fallback: bool,
}

/// Chooses between the initial-view and adjusted-view answers.
pub fn verify(
    gateway: &Gateway,
    prompts: &Prompts,
    question: &str,
    initial: &str,
    adjusted: &str,
) -> Result<Verification> {
    if initial.trim().is_empty() || adjusted.trim().is_empty() {
        return Err(Error::Validation("verification needs two non-empty answers".into()));
    }
    let req = ChatRequest::text(
        prompts.system(),
        prompts.verification(question, initial, adjusted),
        &gateway.tags().verification,
    );
    let (choice, fallback) = ask_index(gateway, req, 2, "verification")?;
    Ok(Verification {
        choice,
        verified_answer: if choice == 0 { initial } else { adjusted }.to_string(),
        fallback,
    })
}

/// Per-instance trace inside an [`AnswerRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub instance: usize,
    pub size: usize,
    pub initial_camera: u32,
    pub per_view_answers: Vec<String>,
    pub selected_view_index: usize,
    pub selected_view: ViewKind,
    pub selection_fallback: bool,
}

/// Everything a question run produced, minus timing, in a stable serialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question: String,
    pub evidence: Vec<String>,
    pub activated: usize,
    pub instances: Vec<InstanceTrace>,
    pub novel_poses: usize,
    /// Images sent to each answering call (one per instance).
    pub frames: usize,
    pub initial_answer: ViewAnswer,
    pub final_answer: ViewAnswer,
    pub verified_answer: String,
    pub verification_choice: usize,
    pub verification_fallback: bool,
    /// Instance whose view the verified answer points at.
    pub answer_instance: usize,
    pub answer_view: ViewKind,
    pub answer_camera: CameraRecord,
}

impl AnswerRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("answer record serialises") + "\n"
    }
}
