use std::collections::BTreeSet;
use std::sync::Mutex;

use nerfattack::sweep::{attacked_subset, run_sweep, sweep_scene, RunOptions, SweepKind, SweepSpec};
use nerfattack::table::to_csv;
use nerfattack_core::render::{RendererArch, RendererParams};
use nerfattack_core::scene::EditKind;

fn params() -> RendererParams {
    RendererParams::init(RendererArch::default(), 7).unwrap()
}

fn tiny(kind: SweepKind) -> SweepSpec {
    let mut spec = SweepSpec::ci(kind);
    spec.scenes = 1;
    spec.repeats = 1;
    spec.resolution = 8;
    spec.attack.steps = 2;
    spec.attack.samples_per_ray = 4;
    spec
}

#[test]
fn one_views_run_gives_a_one_cell_grid() {
    let mut spec = tiny(SweepKind::Views);
    spec.s_values = vec![4];
    spec.k_values = Some(vec![4]);
    let r = run_sweep(&spec, &params(), &RunOptions::default()).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!(r.cells.len(), 1);
    let c = &r.cells[0];
    assert_eq!((c.series, c.k, c.n_runs), (4, 4, 1));
    assert_eq!(c.std_distance, 0.0);
    assert_eq!(r.runs[0].attacked, vec![0, 1, 2, 3]);
    assert_eq!(r.runs[0].constraints_ok, Some(true));
}

#[test]
fn one_patch_run_gives_a_one_cell_grid() {
    let mut spec = tiny(SweepKind::Patch);
    spec.patch_sizes = vec![2];
    spec.k_values = Some(vec![1]);
    let r = run_sweep(&spec, &params(), &RunOptions::default()).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!((r.cells[0].series, r.cells[0].k), (2, 1));
    assert_eq!(r.runs[0].attacked.len(), 1);
    assert_eq!(r.runs[0].constraints_ok, Some(true));
}

#[test]
fn every_cell_holds_scenes_times_repeats_runs() {
    let mut spec = tiny(SweepKind::Views);
    spec.s_values = vec![3, 2];
    spec.scenes = 3;
    spec.repeats = 2;
    spec.attack.steps = 1;
    let r = run_sweep(&spec, &params(), &RunOptions::default()).unwrap();
    assert_eq!(r.cells.len(), 3 + 2);
    assert!(r.cells.iter().all(|c| c.n_runs == 6 && c.std_distance >= 0.0));
    let edits: BTreeSet<_> = r.runs.iter().map(|x| format!("{:?}", x.edit)).collect();
    assert_eq!(edits.len(), 3, "all edit kinds appear");
    assert!(r.runs.iter().all(|x| x.constraints_ok == Some(true)));
}

#[test]
fn reruns_and_worker_counts_agree_bitwise() {
    let mut spec = tiny(SweepKind::Views);
    spec.s_values = vec![3];
    spec.scenes = 2;
    spec.repeats = 2;
    let p = params();
    let run = |threads| run_sweep(&spec, &p, &RunOptions { threads, ..RunOptions::default() }).unwrap();
    let one = run(1);
    assert_eq!(to_csv(&one).unwrap(), to_csv(&run(1)).unwrap());
    let many = run(4);
    assert_eq!(to_csv(&one).unwrap(), to_csv(&many).unwrap());
    let untimed = |r: &nerfattack::sweep::SweepResult| {
        r.runs.iter().map(|x| nerfattack::sweep::RunRecord { wall_seconds: 0.0, ..x.clone() }).collect::<Vec<_>>()
    };
    assert_eq!(untimed(&one), untimed(&many));
}

#[test]
fn progress_sees_every_run_and_artifacts_are_named() {
    let mut spec = tiny(SweepKind::Patch);
    spec.patch_sizes = vec![2];
    spec.k_values = Some(vec![1, 3]);
    let seen = Mutex::new(Vec::new());
    let progress =
        |_: &nerfattack::sweep::RunRecord, done: usize, total: usize| seen.lock().unwrap().push((done, total));
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { threads: 1, artifacts: Some(dir.path()), progress: Some(&progress) };
    run_sweep(&spec, &params(), &opts).unwrap();
    assert_eq!(*seen.lock().unwrap(), vec![(1, 2), (2, 2)]);
    let mut names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "attack_scene000_patch_1views_2px_0.json",
            "attack_scene000_patch_1views_2px_0.ppm",
            "attack_scene000_patch_3views_2px_0.json",
            "attack_scene000_patch_3views_2px_0.ppm",
        ]
    );
}

#[test]
fn scenes_cycle_edit_kinds_and_share_geometry_across_s() {
    let spec = tiny(SweepKind::Views);
    let kinds: Vec<EditKind> = (0..6).map(|i| sweep_scene(&spec, i, 4).unwrap().edit).collect();
    assert_eq!(kinds[..3], [EditKind::Modify, EditKind::Delete, EditKind::Add]);
    assert_eq!(kinds[..3], kinds[3..]);
    let (a, b) = (sweep_scene(&spec, 1, 4).unwrap(), sweep_scene(&spec, 1, 10).unwrap());
    assert_eq!(a.dataset.scene, b.dataset.scene);
    assert_eq!(a.dataset.source_views.len(), 4);
    assert_ne!(a.edited_target, a.dataset.target_views[0].image);
}

#[test]
fn attacked_subsets_are_uniform() {
    // Each view of 5 should be picked by about 2/5 of the 2-subsets.
    let mut counts = [0usize; 5];
    let n = 4000;
    for rep in 0..n {
        for i in attacked_subset(3, 5, 0, rep, 5, 2) {
            counts[i] += 1;
        }
    }
    for c in counts {
        let frac = c as f64 / n as f64;
        assert!((frac - 0.4).abs() < 0.04, "{counts:?}");
    }
}

#[test]
fn invalid_specs_are_rejected_before_running() {
    let mut spec = tiny(SweepKind::Views);
    spec.s_values = vec![4];
    spec.k_values = Some(vec![5]);
    assert!(run_sweep(&spec, &params(), &RunOptions::default()).is_err());
    let mut spec = tiny(SweepKind::Views);
    spec.repeats = 0;
    assert!(run_sweep(&spec, &params(), &RunOptions::default()).is_err());
}
