//! Interleaved image-text sequences.
//!
//! Images and videos are replaced by `<|image|>` placeholder tokens in the
//! text stream. Each placeholder owns one or more image slots (the global
//! view, optional high-resolution crops, or one video frame); every slot keeps
//! the token index of its placeholder, which later drives both the rotary
//! positions of the visual keys and the causal cross-attention mask.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque identifier of a source image or video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Segment {
    Text { tokens: Vec<u32> },
    Image { image_id: ImageId, width: u32, height: u32 },
    Video { image_id: ImageId, frame_count: u32 },
}

impl Segment {
    pub fn text(tokens: impl Into<Vec<u32>>) -> Self {
        Segment::Text { tokens: tokens.into() }
    }

    pub fn image(id: u64, width: u32, height: u32) -> Self {
        Segment::Image {
            image_id: ImageId(id),
            width,
            height,
        }
    }

    pub fn video(id: u64, frame_count: u32) -> Self {
        Segment::Video {
            image_id: ImageId(id),
            frame_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropPolicy {
    #[default]
    Off,
    On,
}

/// A `(rows, cols)` tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub rows: u32,
    pub cols: u32,
}

impl Grid {
    pub const SINGLE: Grid = Grid { rows: 1, cols: 1 };

    /// High-resolution cropping candidates.
    pub const CANDIDATES: [Grid; 7] = [
        Grid { rows: 2, cols: 2 },
        Grid { rows: 1, cols: 3 },
        Grid { rows: 1, cols: 4 },
        Grid { rows: 3, cols: 1 },
        Grid { rows: 4, cols: 1 },
        Grid { rows: 2, cols: 3 },
        Grid { rows: 3, cols: 2 },
    ];

    pub fn cells(&self) -> u32 {
        self.rows * self.cols
    }
}

/// Which part of the source the slot's features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotRole {
    Global,
    Crop { grid: Grid, row: u32, col: u32 },
    Frame { index: u32 },
}

impl SlotRole {
    /// Global views and video frames are "original" images: one per placeholder.
    pub fn is_original(&self) -> bool {
        !matches!(self, SlotRole::Crop { .. })
    }
}

impl fmt::Display for SlotRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotRole::Global => write!(f, "global"),
            SlotRole::Crop { grid, row, col } => {
                write!(f, "crop:{}x{}@{},{}", grid.rows, grid.cols, row, col)
            }
            SlotRole::Frame { index } => write!(f, "frame:{index}"),
        }
    }
}

impl std::str::FromStr for SlotRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "global" {
            return Ok(SlotRole::Global);
        }
        if let Some(rest) = s.strip_prefix("frame:") {
            let index = rest.parse().map_err(|e| format!("frame index: {e}"))?;
            return Ok(SlotRole::Frame { index });
        }
        let rest = s
            .strip_prefix("crop:")
            .ok_or_else(|| format!("unknown slot role {s:?}"))?;
        let (grid, cell) = rest.split_once('@').ok_or("crop role needs '@'")?;
        let (rows, cols) = grid.split_once('x').ok_or("crop grid needs 'x'")?;
        let (row, col) = cell.split_once(',').ok_or("crop cell needs ','")?;
        let num = |v: &str| v.parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
        Ok(SlotRole::Crop {
            grid: Grid {
                rows: num(rows)?,
                cols: num(cols)?,
            },
            row: num(row)?,
            col: num(col)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub slot_index: usize,
    pub image_id: ImageId,
    pub placeholder_position: usize,
    pub role: SlotRole,
}

impl ImageSlot {
    /// Key under which visual features for this slot are generated.
    pub fn feature_key(&self) -> u64 {
        let sub = match self.role {
            SlotRole::Global => 0,
            SlotRole::Crop { grid, row, col } => 1 + (row * grid.cols + col) as u64,
            SlotRole::Frame { index } => 1 + index as u64,
        };
        self.image_id.0 ^ sub.rotate_right(16)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub tokens: Vec<u32>,
    pub image_token: u32,
    pub slots: Vec<ImageSlot>,
}

impl InterleavedSequence {
    /// A sequence with no images.
    pub fn text_only(tokens: Vec<u32>, image_token: u32) -> Self {
        Self {
            tokens,
            image_token,
            slots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn placeholder_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == self.image_token)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the structural invariants tying slots to placeholder tokens.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("sequence: {msg}")));
        let placeholders = self.placeholder_positions();
        let mut originals = Vec::new();
        let mut last_pos = 0usize;
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.slot_index != i {
                return bad(format!("slot {i} has index {}", slot.slot_index));
            }
            let pos = slot.placeholder_position;
            if pos >= self.tokens.len() || self.tokens[pos] != self.image_token {
                return bad(format!("slot {i} points at non-placeholder {pos}"));
            }
            if pos < last_pos {
                return bad(format!("slot {i} position {pos} decreases"));
            }
            last_pos = pos;
            if slot.role.is_original() {
                originals.push(pos);
            }
        }
        if originals != placeholders {
            return bad(format!(
                "original slots at {originals:?} but placeholders at {placeholders:?}"
            ));
        }
        Ok(())
    }
}

/// Picks the crop grid whose aspect ratio is closest to the image's in log space.
///
/// Ties go to fewer cells, then to the lexicographically smaller `(rows, cols)`.
pub fn select_crop_grid(width: i64, height: i64) -> Result<Grid> {
    if width <= 0 || height <= 0 {
        return Err(Error::NonPositiveDimensions { width, height });
    }
    Ok(closest_grid((width as f64 / height as f64).ln()))
}

fn closest_grid(log_aspect: f64) -> Grid {
    let mut best = (f64::INFINITY, Grid::SINGLE);
    for grid in Grid::CANDIDATES {
        let dist = ((grid.cols as f64 / grid.rows as f64).ln() - log_aspect).abs();
        let (bd, bg) = best;
        let better = if (dist - bd).abs() <= 1e-12 {
            (grid.cells(), grid.rows, grid.cols) < (bg.cells(), bg.rows, bg.cols)
        } else {
            dist < bd
        };
        if better {
            best = (dist, grid);
        }
    }
    best.1
}

/// Expands image and video segments into placeholders and image slots.
pub fn build_sequence(segments: &[Segment], crop_policy: CropPolicy, image_token: u32) -> Result<InterleavedSequence> {
    if segments.is_empty() {
        return Err(Error::EmptySegments);
    }
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    let invalid = |index: usize, reason: &str| Error::InvalidSegment {
        index,
        reason: reason.to_string(),
    };
    for (index, seg) in segments.iter().enumerate() {
        match seg {
            Segment::Text { tokens: t } => {
                if t.is_empty() {
                    return Err(invalid(index, "empty text segment"));
                }
                if t.contains(&image_token) {
                    return Err(invalid(index, "text uses the reserved image token"));
                }
                tokens.extend_from_slice(t);
            }
            Segment::Image {
                image_id,
                width,
                height,
            } => {
                if *width == 0 || *height == 0 {
                    return Err(invalid(index, "zero image dimension"));
                }
                let pos = tokens.len();
                tokens.push(image_token);
                let mut push = |role| {
                    slots.push(ImageSlot {
                        slot_index: slots.len(),
                        image_id: *image_id,
                        placeholder_position: pos,
                        role,
                    })
                };
                push(SlotRole::Global);
                if crop_policy == CropPolicy::On {
                    let grid = select_crop_grid(*width as i64, *height as i64)?;
                    for row in 0..grid.rows {
                        for col in 0..grid.cols {
                            push(SlotRole::Crop { grid, row, col });
                        }
                    }
                }
            }
            Segment::Video { image_id, frame_count } => {
                if *frame_count == 0 {
                    return Err(invalid(index, "video needs at least one frame"));
                }
                for frame in 0..*frame_count {
                    let pos = tokens.len();
                    tokens.push(image_token);
                    slots.push(ImageSlot {
                        slot_index: slots.len(),
                        image_id: *image_id,
                        placeholder_position: pos,
                        role: SlotRole::Frame { index: frame },
                    });
                }
            }
        }
    }
    Ok(InterleavedSequence {
        tokens,
        image_token,
        slots,
    })
}

/// Rotary positions: text tokens use their index, every visual key uses the
/// index of its image's placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotaryPositionMap {
    pub query_positions: Vec<usize>,
    pub visual_key_positions: Vec<usize>,
}

impl RotaryPositionMap {
    /// Per-patch key positions when each slot contributes `patches` keys.
    pub fn patch_positions(&self, patches: usize) -> Vec<usize> {
        self.visual_key_positions
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, patches))
            .collect()
    }

    /// Adds `shift` to every query and key position.
    pub fn shifted(&self, shift: usize) -> Self {
        Self {
            query_positions: self.query_positions.iter().map(|p| p + shift).collect(),
            visual_key_positions: self.visual_key_positions.iter().map(|p| p + shift).collect(),
        }
    }
}

pub fn build_rope_map(seq: &InterleavedSequence) -> RotaryPositionMap {
    RotaryPositionMap {
        query_positions: (0..seq.len()).collect(),
        visual_key_positions: seq.slots.iter().map(|s| s.placeholder_position).collect(),
    }
}

/// Text-token × image-slot visibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossAttentionMask {
    pub text_len: usize,
    pub num_slots: usize,
    pub visible: Vec<bool>,
}

impl CrossAttentionMask {
    pub fn from_positions(text_len: usize, slot_positions: &[usize]) -> Self {
        let num_slots = slot_positions.len();
        let mut visible = vec![false; text_len * num_slots];
        for t in 0..text_len {
            for (s, &p) in slot_positions.iter().enumerate() {
                visible[t * num_slots + s] = p <= t;
            }
        }
        Self {
            text_len,
            num_slots,
            visible,
        }
    }

    #[inline]
    pub fn is_visible(&self, token: usize, slot: usize) -> bool {
        self.visible[token * self.num_slots + slot]
    }

    pub fn row(&self, token: usize) -> &[bool] {
        &self.visible[token * self.num_slots..(token + 1) * self.num_slots]
    }

    /// True when the token sees no image at all.
    pub fn row_is_empty(&self, token: usize) -> bool {
        !self.row(token).iter().any(|&v| v)
    }
}

pub fn build_cross_mask(seq: &InterleavedSequence) -> CrossAttentionMask {
    let positions: Vec<usize> = seq.slots.iter().map(|s| s.placeholder_position).collect();
    CrossAttentionMask::from_positions(seq.len(), &positions)
}

/// Serializes a sequence to the line-based fixture format:
///
/// ```text
/// # interleaved-sequence v1
/// image_token <id>
/// token <index> <id> <is_placeholder 0|1>
/// slot <slot_index> <image_id> <placeholder_position> <role>
/// ```
///
/// `<role>` is `global`, `frame:<i>` or `crop:<rows>x<cols>@<row>,<col>`.
pub fn to_fixture_text(seq: &InterleavedSequence) -> String {
    let mut out = String::from("# interleaved-sequence v1\n");
    let _ = writeln!(out, "image_token {}", seq.image_token);
    for (i, &t) in seq.tokens.iter().enumerate() {
        let _ = writeln!(out, "token {i} {t} {}", u8::from(t == seq.image_token));
    }
    for s in &seq.slots {
        let _ = writeln!(
            out,
            "slot {} {} {} {}",
            s.slot_index, s.image_id, s.placeholder_position, s.role
        );
    }
    out
}

pub fn parse_fixture_text(text: &str) -> Result<InterleavedSequence> {
    let mut image_token = None;
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<u64> {
            fields
                .get(i)
                .ok_or_else(|| perr(format!("missing field {i}")))?
                .parse::<u64>()
                .map_err(|e| perr(e.to_string()))
        };
        match fields[0] {
            "image_token" => image_token = Some(num(1)? as u32),
            "token" => {
                let (index, id, flag) = (num(1)? as usize, num(2)? as u32, num(3)?);
                if index != tokens.len() {
                    return Err(perr(format!("token index {index} out of order")));
                }
                let expected = image_token.ok_or_else(|| perr("token before image_token".into()))?;
                if (flag == 1) != (id == expected) {
                    return Err(perr("placeholder flag disagrees with token id".into()));
                }
                tokens.push(id);
            }
            "slot" => {
                let role = fields
                    .get(4)
                    .ok_or_else(|| perr("missing role".into()))?
                    .parse::<SlotRole>()
                    .map_err(perr)?;
                slots.push(ImageSlot {
                    slot_index: num(1)? as usize,
                    image_id: ImageId(num(2)?),
                    placeholder_position: num(3)? as usize,
                    role,
                });
            }
            other => return Err(perr(format!("unknown record {other:?}"))),
        }
    }
    let seq = InterleavedSequence {
        tokens,
        image_token: image_token.ok_or(Error::Parse {
            line: 0,
            msg: "missing image_token record".into(),
        })?,
        slots,
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMG: u32 = 511;

    fn grid(rows: u32, cols: u32) -> Grid {
        Grid { rows, cols }
    }

    #[test]
    fn two_images_crop_off() {
        let segs = [
            Segment::text([1, 2, 3]),
            Segment::image(10, 64, 64),
            Segment::text([4, 5]),
            Segment::image(11, 64, 64),
            Segment::text([6]),
        ];
        let seq = build_sequence(&segs, CropPolicy::Off, IMG).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.placeholder_positions(), vec![3, 6]);
        assert_eq!(seq.num_slots(), 2);
        seq.validate().unwrap();
        assert_eq!(build_rope_map(&seq).visual_key_positions, vec![3, 6]);
    }

    #[test]
    fn video_expands_to_frames() {
        let seq = build_sequence(&[Segment::video(3, 8)], CropPolicy::Off, IMG).unwrap();
        assert_eq!(seq.tokens, vec![IMG; 8]);
        assert_eq!(seq.num_slots(), 8);
        let map = build_rope_map(&seq);
        assert_eq!(map.visual_key_positions, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn square_image_with_crops() {
        let segs = [Segment::text([7]), Segment::image(1, 448, 448)];
        let seq = build_sequence(&segs, CropPolicy::On, IMG).unwrap();
        assert_eq!(seq.placeholder_positions(), vec![1]);
        assert_eq!(seq.num_slots(), 5);
        assert_eq!(seq.slots[0].role, SlotRole::Global);
        assert_eq!(
            seq.slots[2].role,
            SlotRole::Crop {
                grid: grid(2, 2),
                row: 0,
                col: 1
            }
        );
        assert_eq!(build_rope_map(&seq).visual_key_positions, vec![1; 5]);
    }

    #[test]
    fn crop_grid_examples() {
        assert_eq!(select_crop_grid(448, 448).unwrap(), grid(2, 2));
        assert_eq!(select_crop_grid(1600, 400).unwrap(), grid(1, 4));
        assert_eq!(select_crop_grid(300, 900).unwrap(), grid(3, 1));
        assert!(select_crop_grid(0, 5).is_err());
        assert!(select_crop_grid(5, -1).is_err());
    }

    #[test]
    fn crop_grid_matches_enumeration_oracle() {
        // Exhaustive enumeration written independently of the scan above.
        for w in (1..=2000).step_by(37) {
            for h in (1..=2000).step_by(41) {
                let aspect = w as f64 / h as f64;
                let mut scored: Vec<(f64, u32, u32, u32)> = Grid::CANDIDATES
                    .iter()
                    .map(|g| {
                        let d = (g.cols as f64 / g.rows as f64 / aspect).ln().abs();
                        (d, g.cells(), g.rows, g.cols)
                    })
                    .collect();
                scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let min = scored[0].0;
                let best = scored
                    .iter()
                    .filter(|s| s.0 - min <= 1e-9)
                    .min_by_key(|s| (s.1, s.2, s.3))
                    .unwrap();
                assert_eq!(select_crop_grid(w, h).unwrap(), grid(best.2, best.3), "{w}x{h}");
            }
        }
    }

    #[test]
    fn grid_tie_prefers_fewer_cells() {
        let midpoint = (3f64.ln() + 4f64.ln()) / 2.0;
        assert_eq!(closest_grid(midpoint), grid(1, 3));
        assert_eq!(closest_grid(-midpoint), grid(3, 1));
        assert_eq!(select_crop_grid(3, 2).unwrap(), grid(2, 3));
    }

    #[test]
    fn cross_mask_inclusive() {
        let segs = [
            Segment::text([1]),
            Segment::image(1, 8, 8),
            Segment::text([2]),
            Segment::image(2, 8, 8),
            Segment::text([3]),
        ];
        let seq = build_sequence(&segs, CropPolicy::Off, IMG).unwrap();
        let mask = build_cross_mask(&seq);
        assert_eq!(mask.row(0), &[false, false]);
        assert_eq!(mask.row(1), &[true, false]);
        assert_eq!(mask.row(2), &[true, false]);
        assert_eq!(mask.row(4), &[true, true]);
    }

    #[test]
    fn cross_mask_edge_cases() {
        let seq = build_sequence(&[Segment::text([1, 2, 3])], CropPolicy::Off, IMG).unwrap();
        let mask = build_cross_mask(&seq);
        assert_eq!(mask.num_slots, 0);
        assert!((0..3).all(|t| mask.row_is_empty(t)));

        let seq = build_sequence(&[Segment::image(1, 4, 4), Segment::text([1, 2])], CropPolicy::Off, IMG).unwrap();
        let mask = build_cross_mask(&seq);
        assert!((0..3).all(|t| mask.is_visible(t, 0)));
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            build_sequence(&[], CropPolicy::Off, IMG),
            Err(Error::EmptySegments)
        ));
        assert!(build_sequence(&[Segment::text([])], CropPolicy::Off, IMG).is_err());
        assert!(build_sequence(&[Segment::video(1, 0)], CropPolicy::Off, IMG).is_err());
        assert!(build_sequence(&[Segment::image(1, 0, 3)], CropPolicy::Off, IMG).is_err());
        assert!(build_sequence(&[Segment::text([IMG])], CropPolicy::Off, IMG).is_err());
        let unknown = r#"[{"kind": "audio", "image_id": 1}]"#;
        assert!(serde_json::from_str::<Vec<Segment>>(unknown).is_err());
    }

    #[test]
    fn fixture_text_roundtrip() {
        let segs = [
            Segment::text([5, 6]),
            Segment::image(9, 1600, 400),
            Segment::video(4, 2),
            Segment::text([7]),
        ];
        let seq = build_sequence(&segs, CropPolicy::On, IMG).unwrap();
        let text = to_fixture_text(&seq);
        assert_eq!(parse_fixture_text(&text).unwrap(), seq);
        assert!(parse_fixture_text("image_token 9\ntoken 0 9 0\n").is_err());
        assert!(parse_fixture_text("image_token 9\nbogus 1\n").is_err());
    }
}
