//! Synthetic fixture generator: renders a small corpus of event clips whose
//! visual structure carries both labels, so the full pipeline can be trained
//! and evaluated quickly on deterministic data.
//!
//! Each event is a flickering grey scene with drifting specks. Events above
//! level 0 also show a jittering rectangle that encodes the level three
//! ways: its colour rotates through a per-level hue, its overall shade
//! darkens monotonically (with a sharp jump between levels 3 and 4 marking
//! the binary facial state: light = no pain, dark = pain), and its area
//! grows with the level. All three cues survive the training augmentations
//! (rotation and flips leave colour and area untouched; brightness scales
//! every channel equally, preserving hue and contrast ratios), so the
//! eight levels stay decodable from pooled descriptors.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::data::image::{save_png, Frame};
use crate::data::{write_manifest, EventRecord, Phase, NPASS_LEVELS};
use crate::error::Result;
use crate::rng::{derive_rng, tag};

pub const SUBJECTS: usize = 9;
pub const EVENTS_PER_LEVEL: [usize; NPASS_LEVELS] = [54, 5, 16, 11, 29, 30, 11, 31];
pub const FPS: f64 = 10.0;
/// Rendered frame edge; preprocess upsamples crops to the model input size.
pub const FRAME_SIZE: usize = 64;

const BG_VALUE: f32 = 0.78;
const FLICKER: f32 = 0.01;
const NUM_SPECKS: usize = 60;
/// Rectangle colour per level (index 0 unused: level 0 draws no rectangle).
/// Hue rotates by level while the channel mean darkens monotonically against
/// the 0.78 grey background, with the biggest step at the facial class
/// boundary (level 3 -> 4).
const RECT_RGB_BY_LEVEL: [[f32; 3]; NPASS_LEVELS] = [
    [1.0, 1.0, 1.0], // unused
    [0.82, 0.57, 0.57],
    [0.52, 0.78, 0.52],
    [0.48, 0.48, 0.72],
    [0.50, 0.08, 0.08],
    [0.06, 0.42, 0.06],
    [0.05, 0.05, 0.35],
    [0.03, 0.03, 0.03],
];
const RECT_BASE_AREA: f64 = 0.28;
const RECT_AREA_PER_LEVEL: f64 = 0.05;
const RECT_AREA_JITTER: f64 = 0.005;
const RECT_POS_JITTER: f64 = 3.0;

pub fn total_events() -> usize {
    EVENTS_PER_LEVEL.iter().sum()
}

#[derive(Debug, Clone)]
pub struct EventPlan {
    pub global_idx: usize,
    pub level: u8,
    pub subject: usize,
    pub event_id: String,
    pub subject_id: String,
    pub facial_raw: u8,
    pub npass: u8,
    pub duration_s: f64,
    pub n_frames: usize,
}

/// Lay out every event (ids, labels, durations) without rendering pixels.
pub fn plan_events(seed: u64) -> Vec<EventPlan> {
    let mut plans = Vec::with_capacity(total_events());
    let mut global_idx = 0usize;
    for (level, &count) in EVENTS_PER_LEVEL.iter().enumerate() {
        for j in 0..count {
            let mut rng = derive_rng(seed, &[tag("synth"), global_idx as u64, 0]);
            let duration_s = (rng.gen_range(9.0_f64..12.0) * 10.0).round() / 10.0;
            let subject = (level + j) % SUBJECTS;
            let facial_raw = if level <= 3 { 0 } else { 1 + (global_idx % 2) as u8 };
            plans.push(EventPlan {
                global_idx,
                level: level as u8,
                subject,
                event_id: format!("s{subject:02}_e{global_idx:03}"),
                subject_id: format!("s{subject:02}"),
                facial_raw,
                npass: level as u8,
                duration_s,
                n_frames: (duration_s * FPS).round() as usize,
            });
            global_idx += 1;
        }
    }
    plans
}

struct Speck {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    value: f32,
}

/// Render all frames for one planned event.
pub fn render_event(plan: &EventPlan, seed: u64) -> Vec<Frame> {
    let mut rng = derive_rng(seed, &[tag("synth"), plan.global_idx as u64, 1]);
    let s = FRAME_SIZE;
    let sf = s as f64;

    let mut specks: Vec<Speck> = (0..NUM_SPECKS)
        .map(|_| Speck {
            x: rng.gen_range(0.0..sf),
            y: rng.gen_range(0.0..sf),
            vx: rng.gen_range(-1.0..1.0),
            vy: rng.gen_range(-1.0..1.0),
            value: rng.gen_range(0.3..0.7),
        })
        .collect();

    let rect = if plan.level > 0 {
        let area_frac = RECT_BASE_AREA
            + RECT_AREA_PER_LEVEL * plan.level as f64
            + rng.gen_range(-RECT_AREA_JITTER..RECT_AREA_JITTER);
        let area_px = area_frac * sf * sf;
        let aspect = rng.gen_range(0.8..1.25);
        let w = (area_px * aspect).sqrt();
        let h = area_px / w;
        let cx = rng.gen_range(w / 2.0 + RECT_POS_JITTER..sf - w / 2.0 - RECT_POS_JITTER);
        let cy = rng.gen_range(h / 2.0 + RECT_POS_JITTER..sf - h / 2.0 - RECT_POS_JITTER);
        let rgb = RECT_RGB_BY_LEVEL[plan.level as usize];
        Some((cx, cy, w, h, rgb))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(plan.n_frames);
    for _ in 0..plan.n_frames {
        let bg = BG_VALUE + rng.gen_range(-FLICKER..FLICKER);
        let mut frame = Frame::filled(s, s, bg);
        for sp in &mut specks {
            sp.x = (sp.x + sp.vx).rem_euclid(sf);
            sp.y = (sp.y + sp.vy).rem_euclid(sf);
            let (px, py) = (sp.x as usize % s, sp.y as usize % s);
            let at = (py * s + px) * 3;
            frame.data[at..at + 3].fill(sp.value);
        }
        if let Some((cx, cy, w, h, rgb)) = rect {
            let jx = cx + rng.gen_range(-RECT_POS_JITTER..RECT_POS_JITTER);
            let jy = cy + rng.gen_range(-RECT_POS_JITTER..RECT_POS_JITTER);
            let x0 = ((jx - w / 2.0).round().max(0.0)) as usize;
            let y0 = ((jy - h / 2.0).round().max(0.0)) as usize;
            let x1 = ((jx + w / 2.0).round() as usize).min(s);
            let y1 = ((jy + h / 2.0).round() as usize).min(s);
            for y in y0..y1 {
                for x in x0..x1 {
                    let at = (y * s + x) * 3;
                    frame.data[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
        frames.push(frame);
    }
    frames
}

/// Render the full corpus under `out_dir`: frames/<event_id>/frame_XXXXX.png
/// plus manifest.tsv. Events render in parallel (independent rng streams).
/// Returns the parsed-back manifest (absolute frame patterns).
pub fn generate(out_dir: &Path, seed: u64) -> Result<Vec<EventRecord>> {
    generate_with(out_dir, seed, None)
}

/// `generate` with at most `per_level_cap` events kept per intensity level
/// (smoke-scale corpora; capped events render identically to their
/// full-corpus counterparts).
pub fn generate_with(out_dir: &Path, seed: u64, per_level_cap: Option<usize>) -> Result<Vec<EventRecord>> {
    let frames_root = out_dir.join("frames");
    fs::create_dir_all(&frames_root)?;
    let mut plans = plan_events(seed);
    if let Some(cap) = per_level_cap {
        let mut kept_per_level = [0usize; NPASS_LEVELS];
        plans.retain(|p| {
            kept_per_level[p.level as usize] += 1;
            kept_per_level[p.level as usize] <= cap
        });
    }
    let records: Vec<EventRecord> = plans
        .par_iter()
        .map(|plan| -> Result<EventRecord> {
            let dir = frames_root.join(&plan.event_id);
            fs::create_dir_all(&dir)?;
            for (i, frame) in render_event(plan, seed).iter().enumerate() {
                save_png(&dir.join(format!("frame_{i:05}.png")), frame)?;
            }
            Ok(EventRecord {
                subject_id: plan.subject_id.clone(),
                event_id: plan.event_id.clone(),
                phase: Phase::Postoperative,
                facial_raw: plan.facial_raw,
                npass: plan.npass,
                start_s: 0.0,
                end_s: plan.duration_s,
                frame_pattern: format!("frames/{}/frame_%05d.png", plan.event_id),
                box_file: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    crate::data::read_manifest(&manifest)
}
