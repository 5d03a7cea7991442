//! Acceptance suite. Runs without the libtest harness so every criterion prints
//! exactly one `PASS`/`FAIL` line; the process exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use splatscope::cluster::{cluster_gaussians, ActivationSource, ClusterParams, ClusterSet};
use splatscope::config::RunConfig;
use splatscope::gateway::{
    BackendError, BackendReply, ChatBackend, ChatRequest, Gateway, GatewayConfig, MockScript, Usage,
};
use splatscope::grounding::{acc_at_k, distill_gt, frustum_filter, miou_3d, normalized_volume, LabeledPoint};
use splatscope::pipeline::{parse_questions, Pipeline};
use splatscope::prompts::Prompts;
use splatscope::refine::{perturb_views, verify, PerturbParams, CANDIDATES_PER_INSTANCE};
use splatscope::render::{render_with, RenderOptions};
use splatscope::scene::{Gaussian, Scene};
use splatscope::semantic::{activate_by_category, activate_by_similarity, EvidenceQuery, SimilarityRule};
use splatscope::synthetic::{fixture_scene, gaussian, look_at, FIXTURE_MOCK_SCRIPT};
use splatscope::views::{visibility_score, visible_gaussians};

use common::*;

/// Max abs channel difference between the renderer and the compositing oracle.
const COLOR_TOL: f64 = 1e-4;
/// Wall-clock budget for criterion 1.
const RENDER_SUITE_SECS: f64 = 30.0;
const RATIO_TOL: f64 = 1e-12;
const MIOU_TOL: f64 = 1e-12;
const VOLUME_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let opts = RenderOptions::default();
    let mut worst = 0.0f64;
    for seed in 0..25u64 {
        let n = 20 + (seed as usize * 7) % 181;
        let scene = random_scene(1000 + seed, n, 1, 64);
        let cam = &scene.cameras()[0];
        let buf = render_with(&scene, cam, None, &opts).map_err(|e| e.to_string())?;
        let oracle = oracle_color(&scene, cam);
        for (a, b) in buf.color.iter().zip(&oracle) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= COLOR_TOL, || {
        format!("max channel diff {worst:.3e} > {COLOR_TOL:e}")
    })?;
    check(secs < RENDER_SUITE_SECS, || {
        format!("took {secs:.1}s, budget {RENDER_SUITE_SECS}s")
    })?;
    Ok(format!(
        "25 scenes, max diff {worst:.3e} <= {COLOR_TOL:e}, {secs:.2}s < {RENDER_SUITE_SECS}s"
    ))
}

fn criterion_2() -> Outcome {
    let opts = RenderOptions::default();
    let mut pairs = 0;
    let mut nonempty = 0;
    for seed in 0..20u64 {
        let n = 40 + (seed as usize * 3) % 61;
        let scene = random_scene(2000 + seed, n, 8, 64);
        // members are the Gaussians on one side, the rest act as occluders
        let cluster: Vec<usize> = scene
            .gaussians()
            .iter()
            .filter(|g| g.mean.x > 0.0)
            .map(|g| g.id)
            .collect();
        for cam in scene.cameras() {
            let got = visible_gaussians(&scene, &cluster, cam, &opts).map_err(|e| e.to_string())?;
            let want = oracle_visible(&scene, &cluster, cam);
            check(got.iter().copied().collect::<BTreeSet<_>>() == want, || {
                format!("scene {seed} camera {}: visible set {got:?} != oracle {want:?}", cam.id)
            })?;
            let score = visibility_score(&scene, &cluster, cam, &opts).map_err(|e| e.to_string())?;
            let ratio = want.len() as f64 / cluster.len() as f64;
            check((score - ratio).abs() <= RATIO_TOL, || {
                format!("scene {seed} camera {}: score {score} vs oracle {ratio}", cam.id)
            })?;
            pairs += 1;
            nonempty += usize::from(!want.is_empty());
        }
    }
    Ok(format!(
        "{pairs} scene/camera pairs set-exact ({nonempty} non-empty), ratio within {RATIO_TOL:e}"
    ))
}

fn activation_fixture(seed: u64) -> (Scene, Vec<Vec<f32>>) {
    let mut r = rng(seed);
    let dim = 16;
    let unit = |r: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect::<Vec<f32>>()
    };
    let vocab: Vec<String> = (0..8).map(|i| format!("cat{i}")).collect();
    let texts: Vec<Vec<f32>> = (0..vocab.len()).map(|_| unit(&mut r)).collect();
    let gs: Vec<Gaussian> = (0..1000)
        .map(|i| {
            let mut g = gaussian(i, [r.random(), r.random(), r.random()], 0.05, 0.8, [0.5; 3]);
            g.category = r.random_bool(0.9).then(|| r.random_range(0..vocab.len()));
            // mix a category text direction into some embeddings so high similarities occur
            let noise = unit(&mut r);
            let base = &texts[r.random_range(0..texts.len())];
            let w = r.random_range(0.0..1.0f32);
            let mixed: Vec<f32> = noise.iter().zip(base).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            let n = mixed.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            g.embedding = Some(mixed.iter().map(|x| (*x as f64 / n) as f32).collect());
            g
        })
        .collect();
    (Scene::new(gs, vec![], vocab).unwrap(), texts)
}

fn oracle_similarity(scene: &Scene, texts: &[Vec<f32>], tau: f64, per_category: bool) -> Vec<usize> {
    let units: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| {
            let n = t.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            t.iter().map(|x| *x as f64 / n).collect()
        })
        .collect();
    let mut out = Vec::new();
    for j in 0..scene.len() {
        let f = scene.gaussians()[j].embedding.as_ref().unwrap();
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for t in &units {
            let mut dot = 0.0;
            for d in 0..f.len() {
                dot += f[d] as f64 * t[d];
            }
            sum += dot;
            max = max.max(dot);
        }
        if (if per_category { max } else { sum }) >= tau {
            out.push(j);
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for seed in 0..5u64 {
        let (scene, texts) = activation_fixture(3000 + seed);
        let mut r = rng(seed);
        for k in 1..=3 {
            let mut cats: Vec<usize> = (0..scene.vocab().len()).collect();
            cats.shuffle(&mut r);
            cats.truncate(k);
            let q = EvidenceQuery::new("q", cats.clone(), 3).map_err(|e| e.to_string())?;
            let got = activate_by_category(&scene, &q).map_err(|e| e.to_string())?;
            let want: Vec<usize> = (0..scene.len())
                .filter(|&j| scene.gaussians()[j].category.is_some_and(|c| cats.contains(&c)))
                .collect();
            check(got == want, || format!("category activation differs for {cats:?}"))?;

            let chosen: Vec<Vec<f32>> = cats.iter().map(|&c| texts[c].clone()).collect();
            for (rule, per) in [(SimilarityRule::Sum, false), (SimilarityRule::PerCategory, true)] {
                let mut prev: Option<BTreeSet<usize>> = None;
                for step in 0..10 {
                    let tau = -0.2 + 0.12 * step as f64;
                    let got = activate_by_similarity(&scene, &chosen, tau, rule).map_err(|e| e.to_string())?;
                    check(got == oracle_similarity(&scene, &chosen, tau, per), || {
                        format!("similarity activation differs at tau {tau} ({rule:?})")
                    })?;
                    let set: BTreeSet<usize> = got.into_iter().collect();
                    if let Some(p) = &prev {
                        check(set.is_subset(p), || format!("activation grew at tau {tau} ({rule:?})"))?;
                    }
                    prev = Some(set);
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "1000-gaussian fixtures, {checked} similarity sweep points plus category scans match, monotone in tau"
    ))
}

fn cluster_positions(scene: &Scene, cs: &ClusterSet) -> BTreeSet<BTreeSet<[u64; 3]>> {
    cs.clusters
        .iter()
        .map(|c| {
            c.iter()
                .map(|&j| scene.gaussians()[j].mean.map(f64::to_bits).into())
                .collect()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut points = normal_blob(&mut r, [0.0, 0.0, 0.0], 30, 0.3);
    points.extend(normal_blob(&mut r, [10.0, 0.0, 0.0], 30, 0.3));
    let scene = point_scene(&points);
    let all: Vec<usize> = (0..scene.len()).collect();
    let params = |eps| ClusterParams {
        min_cluster_size: 10,
        min_samples: 5,
        merge_eps: eps,
    };
    let run = |s: &Scene, ids: &[usize], eps| cluster_gaussians(s, ids, &params(eps), ActivationSource::Category);

    let split = run(&scene, &all, 0.5).map_err(|e| e.to_string())?;
    check(split.len() == 2, || format!("eps 0.5 gave L={}", split.len()))?;
    let blobs = vec![(0..30).collect::<Vec<_>>(), (30..60).collect()];
    check(canonical(&split.clusters) == canonical(&blobs), || {
        "eps 0.5 partition is not the two blobs".into()
    })?;
    check(canonical(&single_linkage(&points, 2.0)) == canonical(&blobs), || {
        "single-linkage oracle disagrees with the blob labels".into()
    })?;
    let merged = run(&scene, &all, 20.0).map_err(|e| e.to_string())?;
    check(merged.len() == 1 && merged.clusters[0].len() == 60, || {
        format!("eps 20 gave L={}", merged.len())
    })?;
    let small = run(&scene, &all[..9], 0.5).map_err(|e| e.to_string())?;
    check(small.is_empty(), || format!("9 points gave L={}", small.len()))?;

    let reference = cluster_positions(&scene, &split);
    for trial in 0..10 {
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut r);
        let s = point_scene(&shuffled);
        let ids: Vec<usize> = (0..s.len()).collect();
        let cs = run(&s, &ids, 0.5).map_err(|e| e.to_string())?;
        check(cluster_positions(&s, &cs) == reference, || {
            format!("shuffle {trial} changed the partition")
        })?;
    }
    Ok("eps 0.5 -> L=2, eps 20 -> L=1, 9 points -> empty, 10 shuffles invariant".into())
}

fn fixture_pipeline() -> Pipeline {
    Pipeline::new(fixture_scene(), Prompts::default(), RunConfig::default()).unwrap()
}

fn fixture_gateway() -> Gateway {
    Gateway::mock(MockScript::parse(FIXTURE_MOCK_SCRIPT).unwrap())
}

fn criterion_5() -> Outcome {
    let pipeline = fixture_pipeline();
    let mut seen = Vec::new();
    for (question, want_l) in [
        ("Where is the sink?", 1),
        ("What color are the pillows?", 2),
        ("What is lying on the table?", 3),
    ] {
        let gw = fixture_gateway();
        let run = pipeline.answer(&gw, question).map_err(|e| e.to_string())?;
        let l = run.selection.clusters.len();
        check(l == want_l, || format!("{question:?}: L={l}, expected {want_l}"))?;
        check(run.record.novel_poses == 4 * l, || {
            format!("{question:?}: K={} for L={l}", run.record.novel_poses)
        })?;
        check(
            run.candidates
                .iter()
                .all(|c| c.views.len() == 5 && c.renders.len() == 5),
            || format!("{question:?}: candidate set size is not 5"),
        )?;
        check(run.record.evidence.len() <= 3, || {
            format!("{question:?}: {} evidence categories", run.record.evidence.len())
        })?;
        let answering: Vec<usize> = gw
            .ledger()
            .iter()
            .filter(|e| e.content.contains("Output Format:"))
            .map(|e| e.images_sha256.len())
            .collect();
        check(answering.len() == 2 && answering.iter().all(|&n| n == l), || {
            format!("{question:?}: answering calls carried {answering:?} frames for L={l}")
        })?;
        check(run.record.frames == l, || {
            format!("{question:?}: frames {} for L={l}", run.record.frames)
        })?;
        seen.push(l);
    }

    // the list-style evidence reply names four vocabulary entries; only three survive
    let gw = fixture_gateway();
    let sel = pipeline
        .select(&gw, "What is lying on the table?")
        .map_err(|e| e.to_string())?;
    check(sel.evidence.selected.len() == 3, || {
        format!("k cap: {} categories kept", sel.evidence.selected.len())
    })?;

    // K = 4L directly from the perturbation stage
    for l in 1..=3usize {
        let gs: Vec<Gaussian> = (0..l)
            .map(|i| gaussian(i, [i as f64, 0.0, 0.0], 0.1, 0.9, [0.5; 3]))
            .collect();
        let cams = vec![look_at(0, [0.0, -5.0, 1.0], [0.0; 3], 32, 32, 60.0)];
        let s = Scene::new(gs, cams.clone(), vec![]).unwrap();
        let clusters = ClusterSet {
            clusters: (0..l).map(|i| vec![i]).collect(),
            source: ActivationSource::Category,
        };
        let initial = vec![cams[0].clone(); l];
        let novel = perturb_views(&s, &initial, &clusters, &PerturbParams::default()).map_err(|e| e.to_string())?;
        check(novel.len() == 4 * l, || {
            format!("perturb_views gave {} poses for L={l}", novel.len())
        })?;
    }
    check(CANDIDATES_PER_INSTANCE == 5, || "candidate constant is not 5".into())?;
    Ok(format!(
        "L in {seen:?}: K = 4L, 5 candidates each, k <= 3 (cap exercised), frames = L"
    ))
}

fn criterion_6() -> Outcome {
    let scene = random_scene(6, 200, 0, 8);
    let weights = normalized_volume(&scene).map_err(|e| e.to_string())?;
    let vols: Vec<f64> = scene
        .gaussians()
        .iter()
        .map(|g| g.scale.x * g.scale.y * g.scale.z * g.opacity)
        .collect();
    let p90 = oracle_percentile(&vols, 90.0);
    for (j, (w, v)) in weights.iter().zip(&vols).enumerate() {
        let want = (v / p90).clamp(0.0, 1.0);
        check((w - want).abs() <= VOLUME_TOL, || format!("weight {j}: {w} vs {want}"))?;
        check((0.0..=1.0).contains(w), || format!("weight {j} = {w} outside [0,1]"))?;
    }
    check(weights.iter().filter(|&&w| w == 1.0).count() >= 20, || {
        "clipping never engaged".into()
    })?;

    let mut r = rng(66);
    let mut ious = Vec::new();
    for pair in 0..100 {
        let a: Vec<usize> = (0..200).filter(|_| r.random_bool(0.3)).collect();
        let b: Vec<usize> = (0..200).filter(|_| r.random_bool(0.3)).collect();
        let got = miou_3d(&a, &b, &weights).map_err(|e| e.to_string())?;
        let (mut inter, mut union) = (0.0, 0.0);
        for (j, w) in weights.iter().enumerate() {
            let (ia, ib) = (a.contains(&j), b.contains(&j));
            if ia && ib {
                inter += w;
            }
            if ia || ib {
                union += w;
            }
        }
        let want = if union > 0.0 { inter / union } else { 0.0 };
        check((got - want).abs() <= MIOU_TOL, || {
            format!("pair {pair}: miou {got} vs {want}")
        })?;
        ious.push(got);
    }
    ious.extend([0.05, 0.08, 0.1, 0.0, 1.0]);
    for k in [5.0, 8.0, 10.0, 25.0, 50.0] {
        let got = acc_at_k(&ious, k).map_err(|e| e.to_string())?;
        let mut hits = 0;
        for v in &ious {
            if *v * 100.0 > k {
                hits += 1;
            }
        }
        let want = 100.0 * hits as f64 / ious.len() as f64;
        check(got == want, || format!("acc@{k}: {got} vs {want}"))?;
    }
    Ok(format!(
        "100 pairs within {MIOU_TOL:e}, acc@k counts exact, percentile weights within {VOLUME_TOL:e} and clipped"
    ))
}

fn criterion_7() -> Outcome {
    let mut cases = 0;
    for seed in 0..6u64 {
        let mut r = rng(7000 + seed);
        let n = 10 + (seed as usize * 8) % 41;
        let gs: Vec<Gaussian> = (0..n).map(|i| random_gaussian(&mut r, i, [0.0; 3], 2.0)).collect();
        let scene = Scene::new(gs, vec![], vec![]).unwrap();
        let points: Vec<(Vector3<f64>, u32)> = (0..500)
            .map(|_| {
                let p = Vector3::new(
                    r.random_range(-2.5..2.5),
                    r.random_range(-2.5..2.5),
                    r.random_range(-2.5..2.5),
                );
                (p, r.random_range(0..4))
            })
            .collect();
        distill_matches(&scene, &points)?;
        cases += 1;
    }

    // a needle along x and a small sphere: points near the needle tip are
    // Euclidean-closer to the sphere but Mahalanobis-closer to the needle
    let mut needle = gaussian(0, [0.0, 0.0, 0.0], 0.05, 0.9, [0.5; 3]);
    needle.scale = Vector3::new(2.0, 0.05, 0.05);
    let sphere = gaussian(1, [1.6, 0.6, 0.0], 0.1, 0.9, [0.5; 3]);
    let scene = Scene::new(vec![needle, sphere], vec![], vec![]).unwrap();
    let points: Vec<(Vector3<f64>, u32)> = (0..500)
        .map(|i| {
            let x = -2.0 + 4.0 * i as f64 / 499.0;
            (Vector3::new(x, 0.0, 0.0), if x > 1.0 { 7 } else { 3 })
        })
        .collect();
    let differs = points.iter().any(|(p, _)| {
        let euclid = if (p - scene.gaussians()[0].mean).norm() < (p - scene.gaussians()[1].mean).norm() {
            0
        } else {
            1
        };
        euclid != nearest_mahalanobis(&scene, p)
    });
    check(differs, || {
        "anisotropic fixture does not separate the two metrics".into()
    })?;
    distill_matches(&scene, &points)?;
    Ok(format!(
        "{cases} random fixtures (<= 50 x 500) plus the anisotropic fixture match"
    ))
}

fn distill_matches(scene: &Scene, points: &[(Vector3<f64>, u32)]) -> Result<(), String> {
    let labelled: Vec<LabeledPoint> = points
        .iter()
        .map(|(p, i)| LabeledPoint {
            position: *p,
            instance: *i,
        })
        .collect();
    let got = distill_gt(&labelled, scene).map_err(|e| e.to_string())?;
    let want = oracle_distill(scene, points);
    check(got.labels == want, || {
        format!("labels {:?} != oracle {want:?}", got.labels)
    })
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let pts: Vec<Gaussian> = (0..500)
        .map(|i| {
            gaussian(
                i,
                [
                    r.random_range(-6.0..6.0),
                    r.random_range(-6.0..6.0),
                    r.random_range(-6.0..6.0),
                ],
                0.05,
                0.9,
                [0.5; 3],
            )
        })
        .collect();
    let scene = Scene::new(pts, vec![], vec![]).unwrap();
    let all: Vec<usize> = (0..scene.len()).collect();
    let mut inside_total = 0;
    for c in 0..10u32 {
        let eye = [
            r.random_range(-4.0..4.0),
            r.random_range(-4.0..4.0),
            r.random_range(-4.0..4.0),
        ];
        let target = [
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        ];
        let (w, h) = (r.random_range(16..96), r.random_range(16..96));
        let mut cam = look_at(c, eye, target, w, h, r.random_range(40.0..100.0));
        cam.cx += r.random_range(-4.0..4.0);
        cam.near = r.random_range(0.05..1.0);
        cam.far = r.random_range(3.0..9.0);
        let got = frustum_filter(&scene, &all, &cam).map_err(|e| e.to_string())?;
        let want: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| in_frustum_planes(&cam, &scene.gaussians()[j].mean))
            .collect();
        check(got == want, || {
            format!("camera {c}: {} kept vs oracle {}", got.len(), want.len())
        })?;
        inside_total += want.len();
    }
    Ok(format!(
        "10 cameras x 500 points agree ({inside_total} inside in total)"
    ))
}

const DETERMINISM_QUESTIONS: &str = r#"{"question": "What color are the pillows?", "gt_answer": "red and blue", "gt_instance": 0}
{"question": "Where is the sink?", "gt_answer": "at the far end", "gt_instance": 2}
{"question": "What is lying on the table?", "gt_answer": "pillows and a sink", "gt_instance": 1}
{"question": "What time is it?", "gt_answer": "noon"}
"#;

fn fixture_labels(scene: &Scene) -> splatscope::grounding::InstanceLabeling {
    // instances follow the fixture layout: red pillow, blue pillow, sink, table
    let labels = (0..scene.len()).map(|j| Some((j / 27).min(3) as u32)).collect();
    splatscope::grounding::InstanceLabeling {
        labels,
        source: splatscope::grounding::LabelSource::File,
    }
}

fn deterministic_run() -> Result<(String, String), String> {
    let pipeline = fixture_pipeline();
    let record = pipeline
        .answer(&fixture_gateway(), "What is lying on the table?")
        .map_err(|e| e.to_string())?
        .record
        .to_json();
    let items = parse_questions(DETERMINISM_QUESTIONS).map_err(|e| e.to_string())?;
    let labels = fixture_labels(pipeline.scene());
    let report = pipeline.evaluate(&fixture_gateway(), &items, Some(&labels)).to_json();
    Ok((record, report))
}

fn criterion_9() -> Outcome {
    let mut outputs = Vec::new();
    for threads in [1usize, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        for _ in 0..3 {
            outputs.push((threads, pool.install(deterministic_run)?));
        }
    }
    let (_, first) = &outputs[0];
    for (threads, out) in &outputs[1..] {
        check(out.0 == first.0, || {
            format!("answer record differs with {threads} threads")
        })?;
        check(out.1 == first.1, || {
            format!("metrics report differs with {threads} threads")
        })?;
    }
    let golden = include_str!("golden/answer_table.json");
    check(first.0 == golden, || {
        "answer record differs from tests/golden/answer_table.json".into()
    })?;
    Ok(format!(
        "{} runs over thread counts {{1, 4}} byte-identical ({} + {} bytes), golden record matches",
        outputs.len(),
        first.0.len(),
        first.1.len()
    ))
}

/// Chooses between numbered candidates by the verification rules: refusals are
/// rejected, informative answers beat "not visible" ones, ties go to the lower index.
struct RuleJudge;

const REFUSALS: [&str; 6] = [
    "sorry",
    "can't determine",
    "cannot determine",
    "not sure",
    "maybe",
    "can't tell",
];

fn rank(answer: &str) -> u8 {
    let a = answer.to_lowercase();
    if REFUSALS.iter().any(|r| a.contains(r)) {
        0
    } else if a.contains("not visible") {
        1
    } else {
        2
    }
}

impl ChatBackend for RuleJudge {
    fn send(&self, req: &ChatRequest) -> Result<BackendReply, BackendError> {
        let body = req
            .content_text
            .split("Candidate Answers:")
            .nth(1)
            .and_then(|s| s.split("Return:").next())
            .ok_or_else(|| BackendError::Fatal("no candidates".into()))?;
        let candidates: Vec<(usize, &str)> = body
            .lines()
            .filter_map(|l| {
                let (i, text) = l.split_once(':')?;
                Some((i.trim().parse().ok()?, text.trim()))
            })
            .collect();
        let best = candidates
            .iter()
            .max_by(|a, b| rank(a.1).cmp(&rank(b.1)).then(b.0.cmp(&a.0)))
            .map(|c| c.0)
            .ok_or_else(|| BackendError::Fatal("no candidates".into()))?;
        Ok(BackendReply {
            text: best.to_string(),
            usage: Usage::default(),
        })
    }
}

fn criterion_10() -> Outcome {
    let gw = Gateway::new(Box::new(RuleJudge), GatewayConfig::default());
    let prompts = Prompts::default();
    let informative = "The pillow on the left is red.";
    let cases = [
        ("I'm sorry, I can't determine the color.", informative, 1),
        (informative, "Sorry, I am not sure.", 0),
        ("The pillow is not visible in these images.", informative, 1),
        (informative, "The pillow is not visible here.", 0),
        (informative, informative, 0),
        ("The pillow is red.", "The pillow is blue.", 0),
        ("Maybe red.", "Not sure, sorry.", 0),
    ];
    for (initial, adjusted, want) in cases {
        let v = verify(&gw, &prompts, "What color is the pillow?", initial, adjusted).map_err(|e| e.to_string())?;
        check(v.choice == want, || {
            format!("({initial:?}, {adjusted:?}) chose {} expected {want}", v.choice)
        })?;
        let expected = if want == 0 { initial } else { adjusted };
        check(v.verified_answer == expected, || {
            format!("verified answer {:?}", v.verified_answer)
        })?;
        check(!v.fallback, || "judge reply fell back".into())?;
    }
    Ok(format!(
        "{} cases: refusals lose, informative beats not-visible, ties pick index 0",
        cases.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("renderer matches the compositing oracle", criterion_1),
        ("visibility matches the max-weight oracle", criterion_2),
        ("activation matches exhaustive scans", criterion_3),
        ("clustering fixtures", criterion_4),
        ("structural constants", criterion_5),
        ("metric oracles", criterion_6),
        ("distillation oracle", criterion_7),
        ("frustum oracle", criterion_8),
        ("end-to-end determinism", criterion_9),
        ("verification semantics", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}: {name}", i + 1);
        // numbers select criteria exactly, anything else matches the name
        let selected = |p: &String| match p.parse::<usize>() {
            Ok(n) => n == i + 1,
            Err(_) => name.contains(p.as_str()),
        };
        if !filter.is_empty() && !filter.iter().any(selected) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {label} ({detail})"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label} ({why})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
