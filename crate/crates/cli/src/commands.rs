use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};
use synmocap::calibration::{calibrate as run_calibration, Anchor, CalibrationProblem, ObservationFile};
use synmocap::camera::{CameraRig, RigFile};
use synmocap::init::{initialize_person, InitObservation};
use synmocap::metrics::{Correspondence, EvalSet, MetricsReport};
use synmocap::motion::MotionSequence;
use synmocap::pcm::{load_raster, raster_set, PcmSet, RasterHeader};
use synmocap::pipeline::{self, TrackingRun};
use synmocap::scene::Scene;
use synmocap::skeleton::SkeletonConfig;
use synmocap::tracker::TrackStatus;

use crate::config::{Manifest, RunConfig};
use crate::output::Output;
use crate::{CliError, Common};

fn manifest<A: Serialize>(out: &mut Output, command: &str, cfg: &RunConfig, arguments: A) -> Result<(), CliError> {
    out.write_json(
        "resolved_config.json",
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.scene.seed,
            arguments,
            config: cfg,
        },
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| {
        CliError::Core(synmocap::Error::Json {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn dry_run(files: &[String]) {
    println!("dry run: inputs are valid; would write:");
    for f in files {
        println!("  {f}");
    }
}

fn person_file(dir: &str, person: usize, ext: &str) -> String {
    format!("{dir}/person_{person}.{ext}")
}

fn selected_persons(requested: &Option<Vec<usize>>, available: usize) -> Result<Vec<usize>, CliError> {
    match requested {
        None => Ok((0..available).collect()),
        Some(list) => {
            if let Some(p) = list.iter().find(|&&p| p >= available) {
                return Err(CliError::Usage(format!("--persons: person {p} does not exist ({available} available)")));
            }
            let unique: BTreeSet<usize> = list.iter().copied().collect();
            Ok(unique.into_iter().collect())
        }
    }
}

fn build_scene(cfg: &RunConfig) -> Result<Scene, CliError> {
    Ok(Scene::new(cfg.scene.clone(), cfg.rig()?, &cfg.skeleton()?)?)
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Tracked sphere observations (JSON).
    #[arg(long)]
    pub observations: PathBuf,
    /// Initial rig; defaults to the configured rig.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Sphere frames with known world positions (JSON list of {frame, world}).
    #[arg(long)]
    pub anchors: Option<PathBuf>,
}

pub fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let obs = ObservationFile::load(&args.observations)?;
    let rig = match &args.rig {
        Some(p) => CameraRig::load(p)?,
        None => cfg.rig()?,
    };
    let anchors: Vec<Anchor> = match &args.anchors {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let problem = CalibrationProblem::new(rig, obs.observations)?;
    if common.dry_run {
        dry_run(&["rig.json", "calibration_report.json", "points.csv", "resolved_config.json"].map(String::from));
        return Ok(());
    }
    let result = run_calibration(&problem, &anchors, &cfg.calibration)?;
    let mut out = Output::create(&common.out, "calibrate")?;
    manifest(&mut out, "calibrate", &cfg, (common, args))?;
    out.write_json("rig.json", &RigFile::from_rig(&result.rig))?;
    out.write_json("calibration_report.json", &result.report)?;
    let mut points = String::from("frame,x,y,z\n");
    for (frame, x) in &result.points {
        let _ = writeln!(points, "{frame},{},{},{}", x.x, x.y, x.z);
    }
    out.write("points.csv", points.as_bytes())?;
    let r = &result.report;
    out.log(format!("final_rms_px {}", r.final_rms_px));
    out.finish()?;
    println!(
        "calibration: RMS {:.4} -> {:.4} px in {} iterations, {} outliers removed",
        r.initial_rms_px, r.final_rms_px, r.iterations, r.outliers_removed
    );
    if !r.converged {
        return Err(CliError::NotConverged(format!(
            "bundle adjustment did not converge (final RMS {:.4} px); report written",
            r.final_rms_px
        )));
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Persons to emit (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    pub persons: Option<Vec<usize>>,
}

/// SHA-256 over every blob of every frame in a fixed order, plus the blob
/// count per frame and camera.
fn pcm_digest(scene: &Scene, persons: &[usize]) -> Result<(String, String), CliError> {
    let mut hasher = Sha256::new();
    let mut counts = String::from("frame");
    for c in 0..scene.rig().num_cameras() {
        let _ = write!(counts, "\tcam{c}");
    }
    counts.push('\n');
    for f in 0..scene.num_frames() {
        let pcm = scene.pcm(f)?;
        let _ = write!(counts, "{f}");
        for c in 0..pcm.num_cameras() {
            let mut n = 0;
            for &p in persons {
                for k in 0..pcm.num_keypoints() {
                    let blobs = pcm.blobs(c, p, k)?;
                    hasher.update((blobs.len() as u64).to_le_bytes());
                    for b in blobs {
                        for v in [b.center.x, b.center.y, b.amplitude, b.sigma] {
                            hasher.update(v.to_le_bytes());
                        }
                    }
                    n += blobs.len();
                }
            }
            let _ = write!(counts, "\t{n}");
        }
        counts.push('\n');
    }
    Ok((hex::encode(hasher.finalize()), counts))
}

pub fn synth(common: &Common, args: &SynthArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let scene = build_scene(&cfg)?;
    let persons = selected_persons(&args.persons, scene.num_persons())?;
    if common.dry_run {
        let mut files: Vec<String> = ["rig.json", "scene.json", "pcm_digest.txt", "pcm_blobs.tsv", "resolved_config.json"]
            .map(String::from)
            .to_vec();
        for &p in &persons {
            files.push(person_file("truth", p, "csv"));
            files.push(person_file("skeletons", p, "json"));
        }
        dry_run(&files);
        return Ok(());
    }
    let mut out = Output::create(&common.out, "synth")?;
    manifest(&mut out, "synth", &cfg, (common, args))?;
    out.write_json("rig.json", &RigFile::from_rig(scene.rig()))?;
    out.write_json("scene.json", scene.config())?;
    for &p in &persons {
        out.write(&person_file("truth", p, "csv"), scene.truth(p).to_csv().as_bytes())?;
        out.write_json(&person_file("skeletons", p, "json"), &scene.model(p).to_config())?;
    }
    let (digest, counts) = pcm_digest(&scene, &persons)?;
    out.write("pcm_digest.txt", format!("{digest}\n").as_bytes())?;
    out.write("pcm_blobs.tsv", counts.as_bytes())?;
    out.finish()?;
    println!(
        "synthesized {} frames for {} person(s); confidence-map digest {digest}",
        scene.num_frames(),
        persons.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    /// First-frame detections (JSON list of observations); peaks of the
    /// synthetic scene's first frame when omitted.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// Persons to initialize (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    pub persons: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct InitRecord {
    person: usize,
    frame: usize,
    skeleton: SkeletonConfig,
    angles: Vec<f64>,
    keypoints: Vec<[f64; 3]>,
    rejected: Vec<usize>,
}

#[derive(Serialize)]
struct Excluded {
    person: usize,
    reason: String,
}

fn init_observations(cfg: &RunConfig, file: &Option<PathBuf>, persons: &Option<Vec<usize>>) -> Result<Vec<InitObservation>, CliError> {
    match file {
        Some(path) => {
            let all = InitObservation::load(path)?;
            Ok(match persons {
                Some(list) => all.into_iter().filter(|o| list.contains(&o.person)).collect(),
                None => all,
            })
        }
        None => {
            let scene = build_scene(cfg)?;
            let first = scene.pcm(0)?;
            selected_persons(persons, scene.num_persons())?
                .into_iter()
                .map(|p| Ok(InitObservation::from_pcm(&first, p)?))
                .collect()
        }
    }
}

pub fn init(common: &Common, args: &InitArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let rig = cfg.rig()?;
    let template = cfg.skeleton()?;
    let observations = init_observations(&cfg, &args.observations, &args.persons)?;
    if observations.is_empty() {
        return Err(CliError::Usage("no observations for the selected persons".into()));
    }
    if common.dry_run {
        let mut files: Vec<String> = ["init_observations.json", "init_summary.json", "resolved_config.json"]
            .map(String::from)
            .to_vec();
        files.extend(observations.iter().map(|o| person_file("init", o.person, "json")));
        dry_run(&files);
        return Ok(());
    }
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    let mut first_error = None;
    for obs in &observations {
        match initialize_person(obs, &rig, &template, &cfg.init) {
            Ok(r) => records.push(InitRecord {
                person: r.person,
                frame: r.frame,
                skeleton: r.model.to_config(),
                angles: r.angles.0.iter().copied().collect(),
                keypoints: r.keypoints.iter().map(|k| [k.x, k.y, k.z]).collect(),
                rejected: r.rejected,
            }),
            Err(e @ (synmocap::Error::InitFailure { .. } | synmocap::Error::NoConsensus { .. })) => {
                eprintln!("person {} excluded: {e}", obs.person);
                excluded.push(Excluded {
                    person: obs.person,
                    reason: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if records.is_empty() {
        return Err(first_error.map_or_else(|| CliError::Internal("no person initialized".into()), CliError::Core));
    }
    let mut out = Output::create(&common.out, "init")?;
    manifest(&mut out, "init", &cfg, (common, args))?;
    out.write_json("init_observations.json", &observations)?;
    for r in &records {
        out.write_json(&person_file("init", r.person, "json"), r)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        initialized: Vec<usize>,
        excluded: &'a [Excluded],
    }
    out.write_json(
        "init_summary.json",
        &Summary {
            initialized: records.iter().map(|r| r.person).collect(),
            excluded: &excluded,
        },
    )?;
    out.finish()?;
    println!("initialized {} person(s), excluded {}", records.len(), excluded.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrackArgs {
    /// Persons to track (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    pub persons: Option<Vec<usize>>,
    /// Directory of raster confidence-map sidecars; the synthetic scene
    /// is used when omitted.
    #[arg(long)]
    pub pcm: Option<PathBuf>,
    /// First-frame detections (JSON list of observations) used instead of
    /// the first frame's confidence peaks.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

/// Raster sidecars of a directory, grouped by frame.
struct RasterIndex {
    frames: BTreeMap<usize, Vec<PathBuf>>,
    persons: usize,
    keypoints: usize,
}

impl RasterIndex {
    fn scan(dir: &Path) -> Result<Self, CliError> {
        let mut sidecars: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        sidecars.sort();
        let mut frames: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
        let (mut persons, mut keypoints) = (0, 0);
        for path in sidecars {
            let h: RasterHeader = read_json(&path)?;
            persons = persons.max(h.person + 1);
            keypoints = keypoints.max(h.keypoint + 1);
            frames.entry(h.frame).or_default().push(path);
        }
        if frames.is_empty() {
            return Err(CliError::Usage(format!("{}: no raster sidecars found", dir.display())));
        }
        Ok(Self {
            frames,
            persons,
            keypoints,
        })
    }

    fn range(&self) -> Range<usize> {
        let first = *self.frames.keys().next().expect("non-empty index");
        let last = *self.frames.keys().next_back().expect("non-empty index");
        first..last + 1
    }

    /// Frames without sidecars yield empty fields.
    fn load(&self, frame: usize, rig: &CameraRig) -> synmocap::Result<PcmSet> {
        let rasters = self
            .frames
            .get(&frame)
            .map(|paths| paths.iter().map(|p| load_raster(p)).collect::<synmocap::Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        raster_set(frame, rig, self.persons, self.keypoints, rasters)
    }
}

#[derive(Serialize)]
struct PersonSummary {
    person: usize,
    frames: usize,
    tracked: usize,
    lost_for_frame: usize,
    lost: usize,
    /// Against the synthetic ground truth over the 17 keypoint joints.
    mpjpe_mm: Option<f64>,
}

#[derive(Serialize)]
struct TrackSummary {
    seed: u64,
    first_frame: usize,
    last_frame: usize,
    persons: Vec<PersonSummary>,
    excluded: Vec<Excluded>,
}

fn summarize(run: &TrackingRun, scene: Option<&Scene>, seed: u64, frames: &Range<usize>) -> Result<TrackSummary, CliError> {
    let mut persons = Vec::new();
    for seq in &run.sequences {
        let statuses = run.frames.iter().flat_map(|f| &f.persons).filter(|p| p.person == seq.person);
        let (mut tracked, mut lost_for_frame, mut lost) = (0, 0, 0);
        for p in statuses {
            match p.status {
                TrackStatus::Tracked => tracked += 1,
                TrackStatus::LostForFrame => lost_for_frame += 1,
                TrackStatus::Lost => lost += 1,
            }
        }
        let mpjpe_mm = match scene {
            Some(s) => Some(EvalSet::align(seq, &s.truth(seq.person), &Correspondence::keypoints(), None)?.mpjpe()?),
            None => None,
        };
        persons.push(PersonSummary {
            person: seq.person,
            frames: seq.frames.len(),
            tracked,
            lost_for_frame,
            lost,
            mpjpe_mm,
        });
    }
    Ok(TrackSummary {
        seed,
        first_frame: frames.start,
        last_frame: frames.end - 1,
        persons,
        excluded: run
            .excluded
            .iter()
            .map(|(person, e)| Excluded {
                person: *person,
                reason: e.to_string(),
            })
            .collect(),
    })
}

pub fn track(common: &Common, args: &TrackArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let rig = cfg.rig()?;
    let template = cfg.skeleton()?;
    let (scene, rasters) = match &args.pcm {
        Some(dir) => (None, Some(RasterIndex::scan(dir)?)),
        None => (Some(build_scene(&cfg)?), None),
    };
    let (frames, available) = match (&scene, &rasters) {
        (Some(s), _) => (0..s.num_frames(), s.num_persons()),
        (None, Some(r)) => (r.range(), r.persons),
        (None, None) => unreachable!("one source is always set"),
    };
    let persons = selected_persons(&args.persons, available)?;
    let observations = match &args.init {
        Some(path) => {
            let obs: Vec<InitObservation> = InitObservation::load(path)?
                .into_iter()
                .filter(|o| persons.contains(&o.person))
                .collect();
            if obs.is_empty() {
                return Err(CliError::Usage(format!("{}: no observations for the selected persons", path.display())));
            }
            Some(obs)
        }
        None => None,
    };
    if common.dry_run {
        let mut files: Vec<String> = ["diagnostics.jsonl", "summary.json", "resolved_config.json"].map(String::from).to_vec();
        files.extend(persons.iter().map(|&p| person_file("sequences", p, "csv")));
        dry_run(&files);
        return Ok(());
    }
    let pcm_at = |f: usize| match (&scene, &rasters) {
        (Some(s), _) => s.pcm(f),
        (None, Some(r)) => r.load(f, &rig),
        (None, None) => unreachable!("one source is always set"),
    };
    let run = match &observations {
        Some(obs) => pipeline::run_with_observations(&rig, &template, obs, frames.clone(), &cfg.init, &cfg.tracker, pcm_at)?,
        None => pipeline::run(&rig, &template, &persons, frames.clone(), &cfg.init, &cfg.tracker, pcm_at)?,
    };

    let mut out = Output::create(&common.out, "track")?;
    manifest(&mut out, "track", &cfg, (common, args))?;
    for seq in &run.sequences {
        out.write(&person_file("sequences", seq.person, "csv"), seq.to_csv().as_bytes())?;
    }
    let mut diagnostics = String::new();
    for f in &run.frames {
        diagnostics.push_str(&serde_json::to_string(f).map_err(|e| CliError::Internal(e.to_string()))?);
        diagnostics.push('\n');
    }
    out.write("diagnostics.jsonl", diagnostics.as_bytes())?;
    let summary = summarize(&run, scene.as_ref(), cfg.scene.seed, &frames)?;
    out.write_json("summary.json", &summary)?;
    out.log(format!("threads {}", rayon::current_num_threads()));
    out.finish()?;
    for p in &summary.persons {
        let err = p.mpjpe_mm.map_or(String::new(), |e| format!(", MPJPE {e:.2} mm"));
        println!(
            "person {}: {} frames, {} lost-for-frame, {} lost{err}",
            p.person, p.frames, p.lost_for_frame, p.lost
        );
    }
    for e in &summary.excluded {
        println!("person {} excluded: {}", e.person, e.reason);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Predicted sequence CSV, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth sequence CSV, or a directory of them.
    #[arg(long)]
    pub truth: PathBuf,
    /// Joint correspondence file (JSON); the 17 keypoint joints by default.
    #[arg(long)]
    pub correspondence: Option<PathBuf>,
    /// Score only the 12 body joints (head excluded).
    #[arg(long, conflicts_with = "correspondence")]
    pub body: bool,
    /// First frame to score.
    #[arg(long)]
    pub first: Option<usize>,
    /// Last frame to score (inclusive).
    #[arg(long)]
    pub last: Option<usize>,
    /// PCK distance threshold in millimeters.
    #[arg(long, default_value_t = 100.0)]
    pub pck_mm: f64,
    /// Per-frame MPJPE (mm) at or below which a frame counts as a success.
    #[arg(long, default_value_t = synmocap::metrics::SUCCESS_THRESHOLD_MM)]
    pub success_mm: f64,
}

fn load_sequences(path: &Path) -> Result<BTreeMap<usize, MotionSequence>, CliError> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = BTreeMap::new();
    for f in files {
        let seq = MotionSequence::load(&f)?;
        if out.insert(seq.person, seq).is_some() {
            return Err(CliError::Usage(format!("{}: several sequences for one person", path.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no sequence files", path.display())));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PersonReport {
    person: usize,
    #[serde(flatten)]
    report: MetricsReport,
}

#[derive(Serialize)]
struct EvalReport {
    persons: Vec<PersonReport>,
    overall: MetricsReport,
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let pred = load_sequences(&args.pred)?;
    let truth = load_sequences(&args.truth)?;
    let corr = match (&args.correspondence, args.body) {
        (Some(p), _) => Correspondence::load(p)?,
        (None, true) => Correspondence::body(),
        (None, false) => Correspondence::keypoints(),
    };
    let range = match (args.first, args.last) {
        (None, None) => None,
        (first, last) => Some(first.unwrap_or(0)..=last.unwrap_or(usize::MAX)),
    };
    let mut sets = Vec::new();
    for (person, seq) in &pred {
        let t = truth
            .get(person)
            .ok_or_else(|| synmocap::Error::Lookup(format!("no ground truth for person {person}")))?;
        sets.push((*person, EvalSet::align(seq, t, &corr, range.clone())?));
    }
    let mut persons = Vec::new();
    for (person, set) in &sets {
        persons.push(PersonReport {
            person: *person,
            report: set.report(args.pck_mm, args.success_mm)?,
        });
    }
    let pooled: Vec<EvalSet> = sets.iter().map(|(_, s)| s.clone()).collect();
    let overall = EvalSet::concat(&pooled)?.report(args.pck_mm, args.success_mm)?;
    if common.dry_run {
        dry_run(&["report.json", "per_frame_mpjpe.tsv", "resolved_config.json"].map(String::from));
        return Ok(());
    }

    let mut curves: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for (i, (_, set)) in sets.iter().enumerate() {
        for (frame, e) in set.per_frame_mpjpe() {
            curves.entry(frame).or_insert_with(|| vec![None; sets.len()])[i] = Some(e);
        }
    }
    let mut tsv = String::from("frame");
    for (person, _) in &sets {
        let _ = write!(tsv, "\tperson_{person}");
    }
    tsv.push('\n');
    for (frame, row) in &curves {
        let _ = write!(tsv, "{frame}");
        for v in row {
            let _ = write!(tsv, "\t{}", v.map_or(String::new(), |v| v.to_string()));
        }
        tsv.push('\n');
    }

    let mut out = Output::create(&common.out, "eval")?;
    manifest(&mut out, "eval", &cfg, (common, args))?;
    out.write_json("report.json", &EvalReport { persons, overall: overall.clone() })?;
    out.write("per_frame_mpjpe.tsv", tsv.as_bytes())?;
    out.finish()?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "{} frames: success {:.2}%, MPJPE {} mm, PCP {}%, PCK@{} {}%",
        overall.frames,
        overall.success_rate,
        show(overall.mpjpe_mm),
        show(overall.pcp_endpoint),
        args.pck_mm,
        show(overall.pck)
    );
    Ok(())
}
