//! Dataset handling: the event manifest, label mapping, class balancing,
//! and the preprocess step that turns raw event frame sequences into fixed
//! 32-key-frame clips ready for training.

pub mod image;
pub mod keyframes;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use image::{crop_resize, load_png, save_png, CropRect, Frame};
use keyframes::{motion_scores, select_keyframes, KEYFRAMES};

pub const MIN_EVENT_SECONDS: f64 = 9.0;
pub const CLIP_SIZE: usize = 224;
pub const NPASS_LEVELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Acute,
    Postoperative,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Phase> {
        match s {
            "acute" => Ok(Phase::Acute),
            "postoperative" => Ok(Phase::Postoperative),
            other => Err(Error::Data(format!("unknown phase `{other}`"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Acute => "acute",
            Phase::Postoperative => "postoperative",
        })
    }
}

/// Merge the 0-2 facial scale to the binary stage-1 target: 0 stays no-pain,
/// 1 and 2 merge to pain.
pub fn map_facial_label(raw: u8) -> Result<f64> {
    match raw {
        0 => Ok(0.0),
        1 | 2 => Ok(1.0),
        other => Err(Error::Data(format!("facial score {other} outside 0-2"))),
    }
}

/// One annotated pain/no-pain event. `frame_pattern` is a printf-style path
/// with a `%0Nd` (or `%d`) frame-index placeholder, already resolved against
/// the manifest location.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub subject_id: String,
    pub event_id: String,
    pub phase: Phase,
    pub facial_raw: u8,
    pub npass: u8,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_pattern: String,
    pub box_file: Option<PathBuf>,
}

impl EventRecord {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn pain(&self) -> bool {
        self.facial_raw > 0
    }

    pub fn class(&self) -> &'static str {
        if self.pain() {
            "pain"
        } else {
            "no-pain"
        }
    }
}

/// Substitute `idx` into a `%0Nd`/`%d` pattern.
pub fn format_frame_path(pattern: &str, idx: usize) -> Result<PathBuf> {
    let bad = || Error::Data(format!("frame pattern `{pattern}` has no %d placeholder"));
    let start = pattern.find('%').ok_or_else(bad)?;
    let rest = &pattern[start + 1..];
    let digits_end = rest.find('d').ok_or_else(bad)?;
    let width_spec = &rest[..digits_end];
    if !width_spec.chars().all(|c| c.is_ascii_digit()) {
        return Err(Error::Data(format!("bad placeholder width in `{pattern}`")));
    }
    let width: usize = if width_spec.is_empty() { 0 } else { width_spec.parse().unwrap_or(0) };
    let formatted = format!("{}{:0width$}{}", &pattern[..start], idx, &rest[digits_end + 1..]);
    Ok(PathBuf::from(formatted))
}

/// List an event's frames by expanding the pattern from index 0 until the
/// first missing file.
pub fn expand_frame_pattern(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    loop {
        let path = format_frame_path(pattern, frames.len())?;
        if !path.exists() {
            break;
        }
        frames.push(path);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("no frames match pattern `{pattern}`")));
    }
    Ok(frames)
}

/// Tab-separated manifest, one record per line (no header):
/// subject_id, event_id, phase, class, facial_score_raw, npass_total,
/// start_s, end_s, frame_path_pattern, box_file (`-` when absent).
pub fn write_manifest(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.subject_id,
            e.event_id,
            e.phase,
            e.class(),
            e.facial_raw,
            e.npass,
            e.start_s,
            e.end_s,
            e.frame_pattern,
            e.box_file.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<EventRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, reason: String| Error::Manifest { path: path.to_path_buf(), line, reason };
    let mut events = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(lineno, format!("expected 10 columns, got {}", cols.len())));
        }
        let facial_raw: u8 = cols[4].parse().map_err(|_| err(lineno, format!("bad facial score `{}`", cols[4])))?;
        map_facial_label(facial_raw).map_err(|e| err(lineno, e.to_string()))?;
        match (cols[3], facial_raw > 0) {
            ("pain", true) | ("no-pain", false) => {}
            ("pain", false) | ("no-pain", true) => {
                return Err(err(lineno, format!(
                    "class `{}` contradicts facial score {facial_raw}",
                    cols[3]
                )));
            }
            (other, _) => return Err(err(lineno, format!("unknown class `{other}`"))),
        }
        let npass: u8 = cols[5].parse().map_err(|_| err(lineno, format!("bad npass `{}`", cols[5])))?;
        if npass > 7 {
            return Err(err(lineno, format!("npass {npass} outside 0-7")));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| err(lineno, format!("bad {what} `{s}`")))
        };
        let start_s = parse_f(cols[6], "start_s")?;
        let end_s = parse_f(cols[7], "end_s")?;
        if end_s <= start_s {
            return Err(err(lineno, format!("event duration not positive ({start_s}..{end_s})")));
        }
        let resolve = |s: &str| -> PathBuf {
            let p = PathBuf::from(s);
            if p.is_absolute() { p } else { base.join(p) }
        };
        let event_id = cols[1].to_string();
        if !seen.insert(event_id.clone()) {
            return Err(err(lineno, format!("duplicate event_id `{event_id}`")));
        }
        events.push(EventRecord {
            subject_id: cols[0].to_string(),
            event_id,
            phase: cols[2].parse().map_err(|e: Error| err(lineno, e.to_string()))?,
            facial_raw,
            npass,
            start_s,
            end_s,
            frame_pattern: resolve(cols[8]).to_string_lossy().into_owned(),
            box_file: if cols[9] == "-" { None } else { Some(resolve(cols[9])) },
        });
    }
    Ok(events)
}

/// Keep only events at least `MIN_EVENT_SECONDS` long (inclusive boundary).
/// Returns (retained, dropped-as-too-short).
pub fn filter_min_duration(events: Vec<EventRecord>) -> (Vec<EventRecord>, Vec<EventRecord>) {
    events.into_iter().partition(|e| e.duration() >= MIN_EVENT_SECONDS)
}

/// Under-sample the no-pain class to the pain count when no-pain is the
/// majority. Pain events are never dropped, so a pain-majority set passes
/// through unchanged (the published corpus keeps 101 pain vs 86 no-pain).
/// Seeded and order-preserving.
pub fn balance_events(events: Vec<EventRecord>, seed: u64) -> Result<Vec<EventRecord>> {
    let pain = events.iter().filter(|e| e.pain()).count();
    let nopain = events.len() - pain;
    if pain == 0 || nopain == 0 {
        return Err(Error::Data(format!(
            "cannot balance: {pain} pain vs {nopain} no-pain events"
        )));
    }
    if nopain <= pain {
        return Ok(events);
    }
    let nopain_indices: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.pain())
        .map(|(i, _)| i)
        .collect();
    let mut rng = derive_rng(seed, &[tag("balance")]);
    let mut shuffled = nopain_indices;
    shuffled.shuffle(&mut rng);
    let keep: std::collections::HashSet<usize> = shuffled.into_iter().take(pain).collect();
    Ok(events
        .into_iter()
        .enumerate()
        .filter(|(i, e)| e.pain() || keep.contains(i))
        .map(|(_, e)| e)
        .collect())
}

/// One preprocessed clip: 32 key-frame crops on disk plus its labels.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub event_id: String,
    pub subject_id: String,
    pub phase: Phase,
    pub facial_raw: u8,
    pub npass: u8,
    pub dir: PathBuf,
    pub src_frames: Vec<usize>,
}

impl ClipRecord {
    pub fn frame_paths(&self) -> Vec<PathBuf> {
        (0..KEYFRAMES).map(|i| self.dir.join(format!("kf_{i:02}.png"))).collect()
    }

    pub fn facial_label(&self) -> f64 {
        map_facial_label(self.facial_raw).expect("validated at parse")
    }
}

const CLIPS_HEADER: &str = "event_id\tsubject_id\tphase\tfacial_raw\tnpass\tdir\tsrc_frames";

pub fn write_clips_index(path: &Path, clips: &[ClipRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from(CLIPS_HEADER);
    out.push('\n');
    for c in clips {
        let rel = c.dir.strip_prefix(base).unwrap_or(&c.dir);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.event_id,
            c.subject_id,
            c.phase,
            c.facial_raw,
            c.npass,
            rel.display(),
            c.src_frames.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_clips_index(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, reason: String| Error::Manifest { path: path.to_path_buf(), line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CLIPS_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("bad header `{h}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut clips = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err(lineno, format!("expected 7 columns, got {}", cols.len())));
        }
        let facial_raw: u8 = cols[3].parse().map_err(|_| err(lineno, format!("bad facial_raw `{}`", cols[3])))?;
        let npass: u8 = cols[4].parse().map_err(|_| err(lineno, format!("bad npass `{}`", cols[4])))?;
        let dir = PathBuf::from(cols[5]);
        let src_frames = cols[6]
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| err(lineno, format!("bad src frame `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        clips.push(ClipRecord {
            event_id: cols[0].to_string(),
            subject_id: cols[1].to_string(),
            phase: cols[2].parse().map_err(|e: Error| err(lineno, e.to_string()))?,
            facial_raw,
            npass,
            dir: if dir.is_absolute() { dir } else { base.join(dir) },
            src_frames,
        });
    }
    Ok(clips)
}

/// Load a clip's 32 frames from disk.
pub fn load_clip_frames(clip: &ClipRecord) -> Result<Vec<Frame>> {
    clip.frame_paths().iter().map(|p| load_png(p)).collect()
}

/// Per-frame face boxes: one `x y w h` integer line per frame.
fn read_boxes(path: &Path, n_frames: usize) -> Result<Vec<CropRect>> {
    let text = fs::read_to_string(path)?;
    let boxes: Vec<CropRect> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<i64> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if v.len() != 4 {
                return Err(Error::Data(format!("bad box line `{l}` in {}", path.display())));
            }
            Ok(CropRect { x: v[0] as f64, y: v[1] as f64, w: v[2] as f64, h: v[3] as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    if boxes.len() != n_frames {
        return Err(Error::Data(format!(
            "{} has {} boxes for {} frames",
            path.display(),
            boxes.len(),
            n_frames
        )));
    }
    Ok(boxes)
}

fn check_box_bounds(b: &CropRect, frame: &Frame, event_id: &str, idx: usize) -> Result<()> {
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::Data(format!("event {event_id} frame {idx}: zero-area box {b:?}")));
    }
    if b.x < 0.0 || b.y < 0.0 || b.x + b.w > frame.w as f64 || b.y + b.h > frame.h as f64 {
        return Err(Error::Data(format!(
            "event {event_id} frame {idx}: box {b:?} outside {}x{} frame",
            frame.w, frame.h
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub seed: u64,
    /// Restrict to these subjects (smoke tests); `None` keeps all.
    pub subjects: Option<Vec<String>>,
    pub balance: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { seed: 42, subjects: None, balance: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub events: usize,
    pub dropped_short: usize,
    pub dropped_balance: usize,
    pub keyframes: usize,
    /// Key-frame counts per intensity level 0-7.
    pub per_level_frames: [usize; NPASS_LEVELS],
}

/// Segment, balance, select key frames, crop, and store clips under
/// `out_dir` (clips/<event_id>/kf_XX.png plus a clips.tsv index). Events are
/// independent and processed in parallel.
pub fn preprocess(
    manifest_path: &Path,
    out_dir: &Path,
    opts: &PreprocessOptions,
) -> Result<(Vec<ClipRecord>, PreprocessSummary)> {
    let mut events = read_manifest(manifest_path)?;
    if let Some(subjects) = &opts.subjects {
        events.retain(|e| subjects.contains(&e.subject_id));
    }
    if events.is_empty() {
        return Err(Error::Data("no events to preprocess".into()));
    }
    let (events, dropped) = filter_min_duration(events);
    let n_filtered = events.len();
    let events = if opts.balance { balance_events(events, opts.seed)? } else { events };
    let dropped_balance = n_filtered - events.len();
    if events.is_empty() {
        return Err(Error::Data("all events filtered out".into()));
    }

    let clips_root = out_dir.join("clips");
    fs::create_dir_all(&clips_root)?;
    let clips: Vec<ClipRecord> = events
        .par_iter()
        .map(|event| preprocess_event(event, &clips_root))
        .collect::<Result<Vec<_>>>()?;

    let mut per_level = [0usize; NPASS_LEVELS];
    for c in &clips {
        per_level[c.npass as usize] += KEYFRAMES;
    }
    let summary = PreprocessSummary {
        events: clips.len(),
        dropped_short: dropped.len(),
        dropped_balance,
        keyframes: clips.len() * KEYFRAMES,
        per_level_frames: per_level,
    };
    write_clips_index(&out_dir.join("clips.tsv"), &clips)?;
    Ok((clips, summary))
}

fn preprocess_event(event: &EventRecord, clips_root: &Path) -> Result<ClipRecord> {
    let frame_paths = expand_frame_pattern(&event.frame_pattern)?;
    let frames: Vec<Frame> = frame_paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
    let boxes = match &event.box_file {
        Some(path) => {
            let boxes = read_boxes(path, frames.len())?;
            for (i, (b, f)) in boxes.iter().zip(&frames).enumerate() {
                check_box_bounds(b, f, &event.event_id, i)?;
            }
            Some(boxes)
        }
        None => None,
    };
    let scores = motion_scores(&frames);
    let picked = select_keyframes(frames.len(), &scores, KEYFRAMES);

    let clip_dir = clips_root.join(&event.event_id);
    fs::create_dir_all(&clip_dir)?;
    for (slot, &frame_idx) in picked.iter().enumerate() {
        let crop = boxes.as_ref().map(|b| b[frame_idx]);
        let out = crop_resize(&frames[frame_idx], crop, CLIP_SIZE)?;
        save_png(&clip_dir.join(format!("kf_{slot:02}.png")), &out)?;
    }
    Ok(ClipRecord {
        event_id: event.event_id.clone(),
        subject_id: event.subject_id.clone(),
        phase: event.phase,
        facial_raw: event.facial_raw,
        npass: event.npass,
        dir: clip_dir,
        src_frames: picked,
    })
}

/// Clips grouped by subject, ordered by subject id (useful for LOSO).
pub fn clips_by_subject(clips: &[ClipRecord]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        map.entry(c.subject_id.clone()).or_default().push(i);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(id: &str, subject: &str, facial: u8, dur: f64) -> EventRecord {
        EventRecord {
            subject_id: subject.into(),
            event_id: id.into(),
            phase: Phase::Postoperative,
            facial_raw: facial,
            npass: if facial == 0 { 1 } else { 5 },
            start_s: 0.0,
            end_s: dur,
            frame_pattern: "unused/frame_%05d.png".into(),
            box_file: None,
        }
    }

    #[test]
    fn facial_merge() {
        assert_eq!(map_facial_label(0).unwrap(), 0.0);
        assert_eq!(map_facial_label(1).unwrap(), 1.0);
        assert_eq!(map_facial_label(2).unwrap(), 1.0);
        assert!(map_facial_label(3).is_err());
    }

    #[test]
    fn frame_pattern_formatting() {
        let p = format_frame_path("frames/e1/frame_%05d.png", 7).unwrap();
        assert_eq!(p, PathBuf::from("frames/e1/frame_00007.png"));
        let p = format_frame_path("f_%d.png", 12).unwrap();
        assert_eq!(p, PathBuf::from("f_12.png"));
        assert!(format_frame_path("no_placeholder.png", 0).is_err());
    }

    #[test]
    fn pattern_expansion_stops_at_gap() {
        let dir = tempfile::tempdir().unwrap();
        for i in [0usize, 1, 2, 4] {
            fs::write(dir.path().join(format!("frame_{i:03}.png")), b"x").unwrap();
        }
        let pattern = dir.path().join("frame_%03d.png").to_string_lossy().into_owned();
        let frames = expand_frame_pattern(&pattern).unwrap();
        assert_eq!(frames.len(), 3); // 0,1,2; index 3 missing ends the scan
        let empty = dir.path().join("nope_%03d.png").to_string_lossy().into_owned();
        assert!(expand_frame_pattern(&empty).is_err());
    }

    #[test]
    fn duration_filter_is_inclusive() {
        let events = vec![event("a", "s1", 0, 8.9), event("b", "s1", 0, 9.0), event("c", "s1", 0, 12.0)];
        let (kept, dropped) = filter_min_duration(events);
        let ids: Vec<&str> = kept.iter().map(|e| e.event_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].event_id, "a");
    }

    #[test]
    fn balance_drops_only_majority_nopain() {
        let mut events = Vec::new();
        for i in 0..10 {
            events.push(event(&format!("n{i}"), "s1", 0, 10.0));
        }
        for i in 0..4 {
            events.push(event(&format!("p{i}"), "s1", 2, 10.0));
        }
        let balanced = balance_events(events, 7).unwrap();
        let pain = balanced.iter().filter(|e| e.pain()).count();
        assert_eq!(pain, 4);
        assert_eq!(balanced.len() - pain, 4);
    }

    #[test]
    fn balance_never_drops_pain() {
        let mut events = Vec::new();
        for i in 0..3 {
            events.push(event(&format!("n{i}"), "s1", 0, 10.0));
        }
        for i in 0..5 {
            events.push(event(&format!("p{i}"), "s1", 1, 10.0));
        }
        let balanced = balance_events(events.clone(), 7).unwrap();
        assert_eq!(balanced.len(), events.len());
    }

    #[test]
    fn balance_rejects_single_class() {
        let events = vec![event("p0", "s1", 1, 10.0), event("p1", "s1", 2, 10.0)];
        assert!(balance_events(events, 7).is_err());
        let events = vec![event("n0", "s1", 0, 10.0)];
        assert!(balance_events(events, 7).is_err());
    }

    #[test]
    fn balance_is_seeded_and_order_preserving() {
        let mut events = Vec::new();
        for i in 0..20 {
            events.push(event(&format!("n{i:02}"), "s1", 0, 10.0));
        }
        for i in 0..5 {
            events.push(event(&format!("p{i}"), "s1", 1, 10.0));
        }
        let a = balance_events(events.clone(), 3).unwrap();
        let b = balance_events(events.clone(), 3).unwrap();
        let c = balance_events(events, 4).unwrap();
        let ids = |v: &[EventRecord]| v.iter().map(|e| e.event_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
        // original relative order preserved
        let nopain_ids: Vec<String> = a.iter().filter(|e| !e.pain()).map(|e| e.event_id.clone()).collect();
        let mut sorted = nopain_ids.clone();
        sorted.sort();
        assert_eq!(nopain_ids, sorted);
    }

    #[test]
    fn manifest_roundtrip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let events = vec![event("e1", "s1", 0, 9.5), event("e2", "s2", 2, 11.0)];
        write_manifest(&path, &events).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].event_id, "e1");
        assert_eq!(back[1].facial_raw, 2);
        // frame pattern resolves relative to the manifest location
        assert!(back[0].frame_pattern.starts_with(dir.path().to_str().unwrap()));
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let write = |row: &str| {
            fs::write(&path, format!("{row}\n")).unwrap();
            read_manifest(&path)
        };
        // facial score outside 0-2
        let e = write("s1\te1\tpostoperative\tpain\t3\t4\t0\t10\tf_%d.png\t-").unwrap_err();
        assert!(e.to_string().contains("facial"), "{e}");
        // class contradicting the facial score
        let e = write("s1\te1\tpostoperative\tno-pain\t2\t4\t0\t10\tf_%d.png\t-").unwrap_err();
        assert!(e.to_string().contains("contradicts"), "{e}");
        // npass outside 0-7
        let e = write("s1\te1\tpostoperative\tpain\t1\t8\t0\t10\tf_%d.png\t-").unwrap_err();
        assert!(e.to_string().contains("npass"), "{e}");
        // zero and negative durations
        assert!(write("s1\te1\tpostoperative\tpain\t1\t4\t10\t10\tf_%d.png\t-").is_err());
        assert!(write("s1\te1\tpostoperative\tpain\t1\t4\t10\t3\tf_%d.png\t-").is_err());
        // duplicate ids
        fs::write(
            &path,
            "s1\te1\tpostoperative\tpain\t1\t4\t0\t10\tf_%d.png\t-\ns1\te1\tpostoperative\tpain\t1\t4\t0\t10\tf_%d.png\t-\n",
        )
        .unwrap();
        let e = read_manifest(&path).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
    }

    #[test]
    fn preprocess_end_to_end_tiny() {
        // Two synthetic events written straight to disk: one normal, one
        // cropped via a box file.
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (eid, n_frames) in [("e1", 40usize), ("e2", 35)] {
            let fdir = root.join("frames").join(eid);
            fs::create_dir_all(&fdir).unwrap();
            for i in 0..n_frames {
                let mut f = Frame::filled(32, 32, 0.5);
                // moving dot so motion scores vary
                let pos = (i * 3) % 30;
                for c in 0..3 {
                    f.data[(pos * 32 + pos) * 3 + c] = 1.0;
                }
                save_png(&fdir.join(format!("frame_{i:05}.png")), &f).unwrap();
            }
        }
        let boxes: String = (0..35).map(|_| "4 4 20 20\n").collect();
        fs::write(root.join("e2_boxes.tsv"), boxes).unwrap();
        let mut e1 = event("e1", "s1", 2, 10.0);
        e1.npass = 6;
        e1.frame_pattern = "frames/e1/frame_%05d.png".into();
        let mut e2 = event("e2", "s2", 0, 9.0);
        e2.npass = 0;
        e2.frame_pattern = "frames/e2/frame_%05d.png".into();
        e2.box_file = Some(PathBuf::from("e2_boxes.tsv"));
        let manifest = root.join("manifest.tsv");
        write_manifest(&manifest, &[e1, e2]).unwrap();
        let out = root.join("work");
        let (clips, summary) = preprocess(&manifest, &out, &PreprocessOptions::default()).unwrap();
        assert_eq!(summary.events, 2);
        assert_eq!(summary.keyframes, 64);
        assert_eq!(summary.dropped_short, 0);
        assert_eq!(summary.per_level_frames[6], 32);
        assert_eq!(summary.per_level_frames[0], 32);
        for c in &clips {
            assert_eq!(c.src_frames.len(), 32);
            for p in c.frame_paths() {
                let f = load_png(&p).unwrap();
                assert_eq!((f.h, f.w), (CLIP_SIZE, CLIP_SIZE));
            }
        }
        // index roundtrip
        let back = read_clips_index(&out.join("clips.tsv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].event_id, clips[0].event_id);
        assert_eq!(back[0].src_frames, clips[0].src_frames);
        assert!(back[0].dir.exists());
    }

    #[test]
    fn preprocess_rejects_out_of_bounds_box() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let fdir = root.join("frames");
        fs::create_dir_all(&fdir).unwrap();
        for i in 0..2 {
            save_png(&fdir.join(format!("frame_{i}.png")), &Frame::filled(16, 16, 0.5)).unwrap();
        }
        fs::write(root.join("boxes.tsv"), "0 0 16 16\n8 8 16 16\n").unwrap();
        let mut e = event("e1", "s1", 1, 10.0);
        e.frame_pattern = "frames/frame_%d.png".into();
        e.box_file = Some(PathBuf::from("boxes.tsv"));
        let manifest = root.join("manifest.tsv");
        write_manifest(&manifest, &[e]).unwrap();
        let err = preprocess(&manifest, &root.join("w"), &PreprocessOptions { balance: false, ..Default::default() })
            .unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }
}
