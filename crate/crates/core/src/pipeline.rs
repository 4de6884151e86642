//! Initialization followed by frame-by-frame tracking over a range of frames.

use std::ops::Range;

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::init::{initialize_person, InitConfig, InitObservation};
use crate::motion::MotionSequence;
use crate::pcm::PcmSet;
use crate::skeleton::SkeletonModel;
use crate::tracker::{FrameResult, Tracker, TrackerConfig};

#[derive(Debug)]
pub struct TrackingRun {
    /// One sequence per tracked person, in the order requested.
    pub sequences: Vec<MotionSequence>,
    /// Personalized skeleton of each tracked person, parallel to `sequences`.
    pub models: Vec<SkeletonModel>,
    /// Per-frame diagnostics, starting with the first tracked frame.
    pub frames: Vec<FrameResult>,
    /// Persons left out because they could not be initialized.
    pub excluded: Vec<(usize, Error)>,
}

/// Initializes `persons` from the confidence peaks of the first frame of
/// `frames`, then tracks them through the remaining frames. `pcm_at` supplies
/// the confidence fields of a frame. Persons that fail to initialize are
/// excluded; the run fails only when none remain.
pub fn run(
    rig: &CameraRig,
    template: &SkeletonModel,
    persons: &[usize],
    frames: Range<usize>,
    init: &InitConfig,
    tracker: &TrackerConfig,
    mut pcm_at: impl FnMut(usize) -> Result<PcmSet>,
) -> Result<TrackingRun> {
    if frames.is_empty() {
        return Err(Error::EmptyRange);
    }
    let first = pcm_at(frames.start)?;
    let observations = persons
        .iter()
        .map(|&p| InitObservation::from_pcm(&first, p))
        .collect::<Result<Vec<_>>>()?;
    run_with_observations(rig, template, &observations, frames, init, tracker, pcm_at)
}

/// [`run`] with the initial detections supplied by the caller, one
/// observation per person, all taken at `frames.start`.
pub fn run_with_observations(
    rig: &CameraRig,
    template: &SkeletonModel,
    observations: &[InitObservation],
    frames: Range<usize>,
    init: &InitConfig,
    tracker: &TrackerConfig,
    mut pcm_at: impl FnMut(usize) -> Result<PcmSet>,
) -> Result<TrackingRun> {
    if frames.is_empty() {
        return Err(Error::EmptyRange);
    }
    if let Some(o) = observations.iter().find(|o| o.frame != frames.start) {
        return Err(Error::config(
            "init.frame",
            format!("person {} observed at frame {}, tracking starts at {}", o.person, o.frame, frames.start),
        ));
    }
    let mut tracks = Vec::with_capacity(observations.len());
    let mut excluded = Vec::new();
    for obs in observations {
        match initialize_person(obs, rig, template, init) {
            Ok(r) => tracks.push(r.into_track(tracker)),
            Err(e @ (Error::InitFailure { .. } | Error::NoConsensus { .. })) => excluded.push((obs.person, e)),
            Err(e) => return Err(e),
        }
    }
    if tracks.is_empty() {
        return Err(excluded
            .into_iter()
            .next()
            .map(|(_, e)| e)
            .unwrap_or_else(|| Error::config("persons", "no person selected")));
    }
    let mut engine = Tracker::new(rig.clone(), tracker.clone(), tracks)?;
    let mut results = Vec::with_capacity(frames.len());
    for frame in frames.start + 1..frames.end {
        let pcm = pcm_at(frame)?;
        results.push(engine.step_frame(&pcm)?);
    }
    let models = engine.persons().iter().map(|p| p.model.clone()).collect();
    Ok(TrackingRun {
        sequences: engine.into_sequences(),
        models,
        frames: results,
        excluded,
    })
}
