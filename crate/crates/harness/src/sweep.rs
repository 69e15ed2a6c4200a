//! Attack sweeps: distance as a function of the number of attacked source
//! views, either for several source-view counts (low-intensity attacks) or
//! for several patch sizes at a fixed view count.

use std::collections::BTreeMap;
use std::path::Path;

use nerfattack_core::attack::{
    low_intensity_attack, patch_attack, AttackConfig, AttackMode, AttackResult, PatchSpec, SUCCESS_THRESHOLD,
};
use nerfattack_core::render::RendererParams;
use nerfattack_core::scene::{
    apply_edit, choose_edit, make_dataset_with, oracle_render, EditKind, MultiViewDataset, RigConfig,
};
use nerfattack_core::train::{scene_seed, split_scene, Split};
use nerfattack_core::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::write_attack_artifacts;
use crate::provenance::Provenance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Views,
    Patch,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Views => "views",
            SweepKind::Patch => "patch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "views" => Some(SweepKind::Views),
            "patch" => Some(SweepKind::Patch),
            _ => None,
        }
    }
}

/// Attack settings shared by every run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTemplate {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub patch_step_size: f64,
    pub momentum_mu: f64,
    pub samples_per_ray: usize,
    pub success_threshold: f64,
}

impl Default for AttackTemplate {
    fn default() -> Self {
        AttackTemplate {
            epsilon: 0.01,
            steps: 1000,
            step_size: 0.001,
            patch_step_size: 0.05,
            momentum_mu: 0.9,
            samples_per_ray: 32,
            success_threshold: SUCCESS_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// Source-view counts (views sweep).
    pub s_values: Vec<usize>,
    /// Patch sides in pixels (patch sweep).
    pub patch_sizes: Vec<usize>,
    /// Source-view count of the patch sweep.
    pub patch_views: usize,
    /// Attacked-view counts; `None` means `1..=S`.
    pub k_values: Option<Vec<usize>>,
    pub scenes: usize,
    pub repeats: usize,
    pub edit_kinds: Vec<EditKind>,
    pub resolution: usize,
    pub primitives: (usize, usize),
    pub attack: AttackTemplate,
    pub seed: u64,
}

impl SweepSpec {
    /// Full-scale grid: 48x48, 1000 steps, 10 scenes x 10 repeats.
    pub fn full(kind: SweepKind) -> Self {
        SweepSpec {
            kind,
            s_values: vec![10, 8, 6, 5, 4],
            patch_sizes: vec![2, 5, 10, 20],
            patch_views: 10,
            k_values: None,
            scenes: 10,
            repeats: 10,
            edit_kinds: vec![EditKind::Modify, EditKind::Delete, EditKind::Add],
            resolution: 48,
            primitives: (2, 4),
            attack: AttackTemplate::default(),
            seed: 0,
        }
    }

    /// Desk-scale grid: 32x32, 16 samples per ray, 300 steps, 3 scenes x 3
    /// repeats.
    pub fn ci(kind: SweepKind) -> Self {
        SweepSpec {
            scenes: 3,
            repeats: 3,
            resolution: 32,
            attack: AttackTemplate { steps: 300, samples_per_ray: 16, ..AttackTemplate::default() },
            ..Self::full(kind)
        }
    }

    /// `(series, S)` pairs: the series label is `S` for a views sweep and the
    /// patch size for a patch sweep.
    pub fn series(&self) -> Vec<(usize, usize)> {
        match self.kind {
            SweepKind::Views => self.s_values.iter().map(|s| (*s, *s)).collect(),
            SweepKind::Patch => self.patch_sizes.iter().map(|p| (*p, self.patch_views)).collect(),
        }
    }

    pub fn k_values_for(&self, s: usize) -> Vec<usize> {
        self.k_values.clone().unwrap_or_else(|| (1..=s).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.scenes == 0 || self.repeats == 0 || self.resolution == 0 {
            return bad("scenes, repeats and resolution must be >= 1".into());
        }
        if self.edit_kinds.is_empty() {
            return bad("edit_kinds must not be empty".into());
        }
        if self.primitives.0 == 0 || self.primitives.0 > self.primitives.1 {
            return bad(format!("bad primitive range {:?}", self.primitives));
        }
        let series = self.series();
        if series.is_empty() {
            return bad("sweep has no series".into());
        }
        for (label, s) in series {
            if s == 0 {
                return bad("source-view counts must be >= 1".into());
            }
            if self.kind == SweepKind::Patch && label > self.resolution {
                return bad(format!("patch size {label} exceeds resolution {}", self.resolution));
            }
            let ks = self.k_values_for(s);
            if ks.is_empty() || ks.iter().any(|k| *k == 0 || *k > s) {
                return bad(format!("attacked-view counts {ks:?} must lie in 1..={s}"));
            }
        }
        if !(self.attack.epsilon >= 0.0) || !(0.0..1.0).contains(&self.attack.momentum_mu) {
            return bad("need epsilon >= 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }

    pub fn run_count(&self) -> usize {
        self.series().iter().map(|(_, s)| self.k_values_for(*s).len()).sum::<usize>() * self.scenes * self.repeats
    }
}

/// One attack run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub series: usize,
    pub k: usize,
    pub scene: usize,
    pub repeat: usize,
    pub edit: EditKind,
    pub attacked: Vec<usize>,
    pub baseline_distance: f64,
    pub final_distance: f64,
    pub success: bool,
    /// Budget / footprint audit of the adversarial views; `None` when the
    /// record was rebuilt from a stored result without its dataset.
    pub constraints_ok: Option<bool>,
    pub wall_seconds: f64,
}

/// Aggregate of all runs sharing `(series, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub series: usize,
    pub k: usize,
    pub mean_distance: f64,
    pub std_distance: f64,
    pub success_rate: f64,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    /// Sorted by `(series, k)`.
    pub cells: Vec<Cell>,
    pub runs: Vec<RunRecord>,
    pub provenance: Option<Provenance>,
}

impl SweepResult {
    pub fn cell(&self, series: usize, k: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.series == series && c.k == k)
    }

    /// Cells grouped by series, each sorted by `k`.
    pub fn by_series(&self) -> BTreeMap<usize, Vec<&Cell>> {
        let mut out: BTreeMap<usize, Vec<&Cell>> = BTreeMap::new();
        for c in &self.cells {
            out.entry(c.series).or_default().push(c);
        }
        out
    }
}

/// Groups runs by `(series, k)` and reduces each group in `(scene, repeat)`
/// order, so the result does not depend on the order runs finished in.
pub fn aggregate(kind: SweepKind, mut runs: Vec<RunRecord>) -> SweepResult {
    runs.sort_by_key(|r| (r.series, r.k, r.scene, r.repeat));
    let mut groups: BTreeMap<(usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.series, r.k)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((series, k), rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.final_distance).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.final_distance - mean).powi(2)).sum::<f64>() / n;
            Cell {
                series,
                k,
                mean_distance: mean,
                std_distance: var.sqrt(),
                success_rate: rs.iter().filter(|r| r.success).count() as f64 / n,
                n_runs: rs.len(),
            }
        })
        .collect();
    SweepResult { kind, cells, runs, provenance: None }
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts.
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Source views, target and edited target of one sweep scene.
pub struct SweepScene {
    pub dataset: MultiViewDataset,
    pub edit: EditKind,
    pub edited_target: nerfattack_core::ad::Tensor,
}

pub fn sweep_scene(spec: &SweepSpec, scene: usize, s: usize) -> Result<SweepScene> {
    let spec_scene = split_scene(spec.seed, Split::Attack, scene, spec.primitives)?;
    let rig = RigConfig { height: spec.resolution, width: spec.resolution, ..RigConfig::default() };
    let dataset = make_dataset_with(&spec_scene, s, &rig, scene_seed(spec.seed, Split::Attack, scene))?;
    let edit_kind = spec.edit_kinds[scene % spec.edit_kinds.len()];
    let t = &dataset.target_views[0];
    let target = (&t.pose, &t.intrinsics);
    let edit = choose_edit(&spec_scene, edit_kind, target, mix(&[spec.seed, scene as u64, 1]))?;
    let edited = apply_edit(&spec_scene, &edit, target)?;
    let edited_target = oracle_render(&edited, &t.pose, &t.intrinsics)?;
    Ok(SweepScene { dataset, edit: edit_kind, edited_target })
}

/// Views to attack for one run: a seeded uniform `k`-subset of `0..s`.
pub fn attacked_subset(seed: u64, series: usize, scene: usize, repeat: usize, s: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, series as u64, scene as u64, repeat as u64, k as u64]));
    let mut idx = sample(&mut rng, s, k).into_vec();
    idx.sort_unstable();
    idx
}

pub fn attack_config(spec: &SweepSpec, series: usize, s: usize, attacked: &[usize], seed: u64) -> AttackConfig {
    let mut mask = vec![false; s];
    for i in attacked {
        mask[*i] = true;
    }
    let a = &spec.attack;
    let mut cfg = match spec.kind {
        SweepKind::Views => AttackConfig::low_intensity(mask),
        SweepKind::Patch => AttackConfig::patch(mask, series),
    };
    cfg.epsilon = if spec.kind == SweepKind::Views { a.epsilon } else { 0.0 };
    cfg.steps = a.steps;
    cfg.step_size = if spec.kind == SweepKind::Views { a.step_size } else { a.patch_step_size };
    cfg.momentum_mu = a.momentum_mu;
    cfg.samples_per_ray = a.samples_per_ray;
    cfg.success_threshold = a.success_threshold;
    cfg.seed = seed;
    cfg
}

/// Exhaustive pixel audit of an attack's adversarial views.
pub fn audit(result: &AttackResult, ds: &MultiViewDataset) -> bool {
    let cfg = &result.config;
    let (h, w) = (ds.height(), ds.width());
    let footprint = match cfg.mode {
        AttackMode::Patch => match PatchSpec::centered(cfg.patch_size, h, w) {
            Ok(p) => Some(p.mask(h, w)),
            Err(_) => return false,
        },
        AttackMode::LowIntensity => None,
    };
    ds.source_views.iter().zip(&result.adversarial_views).zip(&cfg.attacked_mask).all(|((orig, adv), on)| {
        let (o, a) = (orig.image.data(), adv.data());
        if o.len() != a.len() {
            return false;
        }
        (0..o.len()).all(|i| {
            let same = o[i].to_bits() == a[i].to_bits();
            if !on {
                return same;
            }
            match &footprint {
                None => (a[i] - o[i]).abs() <= cfg.epsilon + 1e-12 && (0.0..=1.0).contains(&a[i]),
                Some(m) => {
                    if m[i % (h * w)] {
                        (0.0..=1.0).contains(&a[i])
                    } else {
                        same
                    }
                }
            }
        })
    })
}

#[derive(Clone, Copy, Debug)]
struct Job {
    series: usize,
    s: usize,
    k: usize,
    scene: usize,
    repeat: usize,
}

/// Options that do not change the numbers.
#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    /// Directory for per-run JSON and PPM files.
    pub artifacts: Option<&'a Path>,
    pub progress: Option<&'a (dyn Fn(&RunRecord, usize, usize) + Sync)>,
}

fn run_job(spec: &SweepSpec, params: &RendererParams, job: Job, opts: &RunOptions) -> Result<RunRecord> {
    let sc = sweep_scene(spec, job.scene, job.s)?;
    let attacked = attacked_subset(spec.seed, job.series, job.scene, job.repeat, job.s, job.k);
    let seed = mix(&[spec.seed, job.series as u64, job.scene as u64, job.repeat as u64, job.k as u64, 2]);
    let cfg = attack_config(spec, job.series, job.s, &attacked, seed);
    let result = match spec.kind {
        SweepKind::Views => low_intensity_attack(params, &sc.dataset, &sc.edited_target, &cfg)?,
        SweepKind::Patch => patch_attack(params, &sc.dataset, &sc.edited_target, &cfg)?,
    };
    if let Some(dir) = opts.artifacts {
        let name = format!("scene{:03}", job.scene);
        write_attack_artifacts(dir, &name, job.repeat, &result)?;
    }
    Ok(RunRecord {
        series: job.series,
        k: job.k,
        scene: job.scene,
        repeat: job.repeat,
        edit: sc.edit,
        attacked,
        baseline_distance: result.baseline_distance,
        final_distance: result.final_distance,
        success: result.success,
        constraints_ok: Some(audit(&result, &sc.dataset)),
        wall_seconds: result.wall_seconds,
    })
}

/// Runs every `(series, k, scene, repeat)` attack of `spec` on a worker pool
/// and aggregates by key.
pub fn run_sweep(spec: &SweepSpec, params: &RendererParams, opts: &RunOptions) -> Result<SweepResult> {
    spec.validate()?;
    let mut jobs = Vec::with_capacity(spec.run_count());
    for (series, s) in spec.series() {
        for k in spec.k_values_for(s) {
            for scene in 0..spec.scenes {
                for repeat in 0..spec.repeats {
                    jobs.push(Job { series, s, k, scene, repeat });
                }
            }
        }
    }
    let total = jobs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let r = run_job(spec, params, *job, opts)?;
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                if let Some(p) = opts.progress {
                    p(&r, n, total);
                }
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(aggregate(spec.kind, runs))
}

/// Views sweep ([`SweepKind::Views`]).
pub fn run_views_sweep(spec: &SweepSpec, params: &RendererParams, opts: &RunOptions) -> Result<SweepResult> {
    if spec.kind != SweepKind::Views {
        return Err(Error::Contract("run_views_sweep needs a views spec".into()));
    }
    run_sweep(spec, params, opts)
}

/// Patch sweep ([`SweepKind::Patch`]).
pub fn run_patch_sweep(spec: &SweepSpec, params: &RendererParams, opts: &RunOptions) -> Result<SweepResult> {
    if spec.kind != SweepKind::Patch {
        return Err(Error::Contract("run_patch_sweep needs a patch spec".into()));
    }
    run_sweep(spec, params, opts)
}
