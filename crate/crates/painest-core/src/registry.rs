//! Published reference results for the architectures implemented here,
//! kept for side-by-side comparison in evaluation output. Values are
//! leave-one-subject-out means from the original study.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceEntry {
    /// "frame" (stage 1) or "sequence" (stage 2).
    pub stage: &'static str,
    pub arch: &'static str,
    pub pretrain: &'static str,
    pub eval_set: &'static str,
    pub mse: f64,
    pub mae: f64,
}

pub const REFERENCE: [ReferenceEntry; 10] = [
    ReferenceEntry { stage: "frame", arch: "single-stream", pretrain: "faces", eval_set: "infant-cope", mse: 0.4170, mae: 0.5412 },
    ReferenceEntry { stage: "frame", arch: "single-stream", pretrain: "faces", eval_set: "acute", mse: 0.1979, mae: 0.4035 },
    ReferenceEntry { stage: "frame", arch: "single-stream", pretrain: "faces", eval_set: "postoperative", mse: 0.3606, mae: 0.5155 },
    ReferenceEntry { stage: "frame", arch: "single-stream", pretrain: "acute-transfer", eval_set: "postoperative", mse: 0.3716, mae: 0.5211 },
    ReferenceEntry { stage: "frame", arch: "bilinear", pretrain: "faces+objects", eval_set: "infant-cope", mse: 0.4272, mae: 0.5208 },
    ReferenceEntry { stage: "frame", arch: "bilinear", pretrain: "faces+objects", eval_set: "acute", mse: 0.1917, mae: 0.3458 },
    ReferenceEntry { stage: "frame", arch: "bilinear", pretrain: "faces+objects", eval_set: "postoperative", mse: 0.2955, mae: 0.4575 },
    ReferenceEntry { stage: "frame", arch: "bilinear", pretrain: "acute-transfer", eval_set: "postoperative", mse: 0.2695, mae: 0.4173 },
    ReferenceEntry { stage: "sequence", arch: "single-stream+lstm", pretrain: "acute-transfer", eval_set: "postoperative", mse: 4.8612, mae: 1.7274 },
    ReferenceEntry { stage: "sequence", arch: "bilinear+lstm", pretrain: "acute-transfer", eval_set: "postoperative", mse: 3.9990, mae: 1.5565 },
];

pub fn reference_tsv() -> String {
    let mut out = String::from("stage\tarch\tpretrain\teval_set\tmse\tmae\n");
    for e in REFERENCE {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            e.stage, e.arch, e.pretrain, e.eval_set, e.mse, e.mae
        ));
    }
    out
}
