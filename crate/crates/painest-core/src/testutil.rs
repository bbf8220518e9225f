//! Shared fixtures for in-crate tests: tiny 32x32 clips with a planted,
//! class-dependent texture that random conv features can separate.

use std::path::Path;

use crate::data::image::{save_png, Frame};
use crate::data::keyframes::KEYFRAMES;
use crate::data::{ClipRecord, Phase};

pub fn write_clip(dir: &Path, id: &str, value: f32, subject: &str, npass: u8, facial: u8) -> ClipRecord {
    let clip_dir = dir.join(id);
    std::fs::create_dir_all(&clip_dir).unwrap();
    for i in 0..KEYFRAMES {
        let mut f = Frame::filled(32, 32, 0.78);
        // class-dependent texture: stripes for pain, flat patch otherwise
        let side = 8 + (npass as usize);
        for y in 4..4 + side {
            for x in 4..4 + side {
                if npass >= 4 && x % 2 == 0 {
                    continue;
                }
                let at = (y * 32 + x) * 3;
                f.data[at..at + 3].fill(value);
            }
        }
        // slight per-frame variation
        let at = ((i % 28) * 32 + 30) * 3;
        f.data[at..at + 3].fill(0.1);
        save_png(&clip_dir.join(format!("kf_{i:02}.png")), &f).unwrap();
    }
    ClipRecord {
        event_id: id.into(),
        subject_id: subject.into(),
        phase: Phase::Postoperative,
        facial_raw: facial,
        npass,
        dir: clip_dir,
        src_frames: (0..KEYFRAMES).collect(),
    }
}

/// Two subjects, two clips each: s0 no-pain (facial 0, npass 1), s1 pain
/// (facial 2, npass 6).
pub fn tiny_corpus(dir: &Path) -> Vec<ClipRecord> {
    vec![
        write_clip(dir, "e0", 0.6, "s0", 1, 0),
        write_clip(dir, "e1", 0.6, "s0", 1, 0),
        write_clip(dir, "e2", 0.15, "s1", 6, 2),
        write_clip(dir, "e3", 0.15, "s1", 6, 2),
    ]
}
