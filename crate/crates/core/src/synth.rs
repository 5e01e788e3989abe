//! Ranked stutter synthesis: drop spans of frames and fill each span with
//! copies of the last frame shown before it, at increasing drop rates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::Tensor;

/// Random placements tried per interval before falling back to packing.
const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Anchor frame count `T`.
    pub frames: usize,
    /// Strictly increasing rates in (0, 1), one per level.
    pub drop_rates: Vec<f64>,
    /// Number of intervals `M` the dropped frames are split into.
    pub intervals: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.drop_rates.is_empty() {
            return Err(arg_err!("at least one drop rate is required"));
        }
        if self.drop_rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(arg_err!("drop rates must lie in (0, 1): {:?}", self.drop_rates));
        }
        if self.drop_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(arg_err!("drop rates must be strictly increasing: {:?}", self.drop_rates));
        }
        if self.intervals == 0 {
            return Err(arg_err!("interval count must be at least 1"));
        }
        if self.frames < self.intervals {
            return Err(arg_err!(
                "{} frames cannot hold {} intervals",
                self.frames,
                self.intervals
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.drop_rates.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub start: usize,
    pub len: usize,
    pub hold: usize,
}

impl EditOp {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSchedule {
    #[serde(rename = "T")]
    pub frames: usize,
    /// 1-based fluency level; higher is less fluent.
    pub level: usize,
    pub drop_rate: f64,
    /// Sorted by start; spans never overlap.
    pub ops: Vec<EditOp>,
    pub seed: u64,
}

impl EditSchedule {
    pub fn dropped(&self) -> usize {
        self.ops.iter().map(|o| o.len).sum()
    }

    /// Checks disjointness, bounds, and that every hold frame is shown.
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.frames];
        for op in &self.ops {
            if op.len == 0 || op.end() > self.frames {
                return Err(arg_err!("span {op:?} outside 0..{}", self.frames));
            }
            for c in &mut covered[op.start..op.end()] {
                if *c {
                    return Err(arg_err!("span {op:?} overlaps another span"));
                }
                *c = true;
            }
        }
        for op in &self.ops {
            if op.hold >= op.start || covered[op.hold] {
                return Err(arg_err!("span {op:?} holds a frame that is not shown"));
            }
        }
        Ok(())
    }

    /// Output frame `i` shows anchor frame `map[i]`.
    pub fn source_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.frames).collect();
        for op in &self.ops {
            for m in &mut map[op.start..op.end()] {
                *m = op.hold;
            }
        }
        map
    }
}

/// `round(T * r)`, ties rounded up. A tolerance of 1e-9 absorbs binary
/// representation error in products such as `T * 0.1`.
pub fn drop_count(frames: usize, rate: f64) -> usize {
    (frames as f64 * rate + 0.5 + 1e-9).floor() as usize
}

/// Uniform composition of `total` into `parts` nonnegative lengths
/// (stars and bars).
fn random_composition(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let slots = total + parts - 1;
    let mut bars = sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for b in bars {
        out.push(b - prev);
        prev = b + 1;
    }
    out.push(slots - prev);
    out
}

fn overlaps(placed: &[(usize, usize)], start: usize, len: usize) -> bool {
    placed.iter().any(|&(s, l)| start < s + l && s < start + len)
}

/// Edit schedule of level `k` (1-based). Spans live in `[1, T)` so the first
/// frame is always shown; each span holds the nearest shown frame before it.
pub fn plan_schedule(spec: &SynthSpec, k: usize) -> Result<EditSchedule> {
    spec.validate()?;
    if k == 0 || k > spec.levels() {
        return Err(arg_err!("level {k} outside 1..={}", spec.levels()));
    }
    let t = spec.frames;
    let rate = spec.drop_rates[k - 1];
    let total = drop_count(t, rate);
    if total >= t {
        return Err(arg_err!("drop rate {rate} removes all {t} frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64);

    let lengths: Vec<usize> = random_composition(total, spec.intervals, &mut rng)
        .into_iter()
        .filter(|&l| l > 0)
        .collect();
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(lengths.len());
    'place: for &len in &lengths {
        for _ in 0..PLACEMENT_RETRIES {
            let start = rng.random_range(1..=t - len);
            if !overlaps(&placed, start, len) {
                placed.push((start, len));
                continue 'place;
            }
        }
        placed.clear();
        let mut start = 1;
        for &l in &lengths {
            placed.push((start, l));
            start += l;
        }
        break;
    }
    placed.sort_unstable();

    let mut covered = vec![false; t];
    for &(s, l) in &placed {
        covered[s..s + l].iter_mut().for_each(|c| *c = true);
    }
    let ops = placed
        .into_iter()
        .map(|(start, len)| {
            let hold = (0..start).rev().find(|&i| !covered[i]).unwrap_or(0);
            EditOp { start, len, hold }
        })
        .collect();
    Ok(EditSchedule {
        frames: t,
        level: k,
        drop_rate: rate,
        ops,
        seed: spec.seed,
    })
}

/// One schedule per level, in level order.
pub fn plan_all(spec: &SynthSpec) -> Result<Vec<EditSchedule>> {
    (1..=spec.levels()).map(|k| plan_schedule(spec, k)).collect()
}

/// Frames `[T, ...]` rearranged per the schedule; output has `T` frames.
pub fn apply_schedule(frames: &Tensor, s: &EditSchedule) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.is_empty() || shape[0] != s.frames {
        return Err(arg_err!(
            "schedule is for {} frames but the video has shape {:?}",
            s.frames,
            shape
        ));
    }
    s.validate()?;
    let per = frames.numel() / s.frames.max(1);
    let mut out = Vec::with_capacity(frames.numel());
    for src in s.source_map() {
        out.extend_from_slice(&frames.data()[src * per..(src + 1) * per]);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Number of distinct frames in `[T, ...]`, compared bit-exactly.
pub fn unique_frames(video: &Tensor) -> Result<usize> {
    let t = *video
        .shape()
        .first()
        .ok_or_else(|| dim_err!("scalar is not a video"))?;
    let per = video.numel() / t.max(1);
    let mut keys: Vec<Vec<u64>> = video
        .data()
        .chunks(per.max(1))
        .take(t)
        .map(|f| f.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys.len())
}

/// External-tool command realizing the schedule. Abutting spans sharing a
/// hold frame are merged; each remaining span becomes one `select` that drops
/// it plus one `loop` that repeats its hold frame. Spans are emitted from the
/// last to the first so earlier frame numbers stay valid.
pub fn emit_command(s: &EditSchedule, input: &str, output: &str) -> String {
    if s.ops.is_empty() {
        return format!("ffmpeg -y -i {input} -c copy {output}");
    }
    let mut merged: Vec<EditOp> = Vec::new();
    for op in &s.ops {
        match merged.last_mut() {
            Some(last) if last.end() == op.start && last.hold == op.hold => last.len += op.len,
            _ => merged.push(*op),
        }
    }
    let filters: Vec<String> = merged
        .iter()
        .rev()
        .map(|op| {
            format!(
                "select='not(between(n\\,{}\\,{}))',setpts=N/FRAME_RATE/TB,loop=loop={}:size=1:start={}",
                op.start,
                op.end() - 1,
                op.len,
                op.hold
            )
        })
        .collect();
    format!(
        "ffmpeg -y -i {input} -vf \"{},setpts=N/FRAME_RATE/TB\" -an {output}",
        filters.join(",")
    )
}

/// One command per schedule, in level order.
pub fn emit_commands(schedules: &[EditSchedule], input: &str, output_stem: &str) -> Vec<String> {
    schedules
        .iter()
        .map(|s| emit_command(s, input, &format!("{output_stem}_level{}.mp4", s.level)))
        .collect()
}

/// Anchor followed by its synthesized variants, most fluent first.
#[derive(Clone, Debug)]
pub struct RankedSet {
    pub videos: Vec<Tensor>,
    /// `schedules[k-1]` produced `videos[k]`.
    pub schedules: Vec<EditSchedule>,
}

impl RankedSet {
    /// Intended order: index 0 is the anchor, then levels by drop rate.
    pub fn rank_order(&self) -> Vec<usize> {
        (0..self.videos.len()).collect()
    }
}

pub fn synthesize_ranked_set(anchor: &Tensor, spec: &SynthSpec) -> Result<RankedSet> {
    if anchor.shape().first() != Some(&spec.frames) {
        return Err(arg_err!(
            "anchor shape {:?} does not have {} frames",
            anchor.shape(),
            spec.frames
        ));
    }
    let schedules = plan_all(spec)?;
    let mut videos = Vec::with_capacity(schedules.len() + 1);
    videos.push(anchor.clone());
    for s in &schedules {
        videos.push(apply_schedule(anchor, s)?);
    }
    Ok(RankedSet { videos, schedules })
}
