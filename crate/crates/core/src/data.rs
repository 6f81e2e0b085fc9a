//! Dataset container, synthetic shapes, byte tokenizer, sequence packing, and
//! PPM image I/O.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const BYTE_VOCAB: u32 = 256;
pub const BOI: u32 = 256;
pub const BOT: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;
pub const PREFIX_LEN: usize = 16;
pub const DEFAULT_MAX_TEXT: usize = 16;

const MAGIC: &[u8; 4] = b"JFDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 1 + 2;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Bytes for ids below 256; special ids are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < BYTE_VOCAB).map(|&i| i as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Class,
    Caption,
    None,
}

impl LabelKind {
    fn code(self) -> u8 {
        match self {
            LabelKind::Class => 0,
            LabelKind::Caption => 1,
            LabelKind::None => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(LabelKind::Class),
            1 => Ok(LabelKind::Caption),
            2 => Ok(LabelKind::None),
            _ => Err(Error::Format(format!("unknown label kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(u16),
    Caption(Vec<u8>),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// H·W·3 bytes, row-major RGB.
    pub pixels: Vec<u8>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFile {
    pub height: usize,
    pub width: usize,
    pub label_kind: LabelKind,
    pub num_classes: usize,
    pub records: Vec<Record>,
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.pixels.len() != self.image_bytes() {
                return Err(Error::Shape(format!("record {i} has {} bytes", r.pixels.len())));
            }
            match (&r.label, self.label_kind) {
                (Label::Class(c), LabelKind::Class) if (*c as usize) < self.num_classes => {}
                (Label::Caption(c), LabelKind::Caption) if c.len() <= u16::MAX as usize => {}
                (Label::None, LabelKind::None) => {}
                _ => return Err(Error::Format(format!("record {i} label does not match header"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (self.image_bytes() + 2));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.label_kind.code());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.pixels);
            match &r.label {
                Label::Class(c) => out.extend_from_slice(&c.to_le_bytes()),
                Label::Caption(c) => {
                    out.extend_from_slice(&(c.len() as u16).to_le_bytes());
                    out.extend_from_slice(c);
                }
                Label::None => {}
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(4);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let (count, height, width) = (u32_at(8), u32_at(12), u32_at(16));
        let label_kind = LabelKind::from_code(bytes[20])?;
        let num_classes = u16::from_le_bytes([bytes[21], bytes[22]]) as usize;
        let image = height * width * 3;
        let mut pos = HEADER_LEN;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Format("dataset file is truncated".into()));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let pixels = take(image)?.to_vec();
            let label = match label_kind {
                LabelKind::Class => {
                    let b = take(2)?;
                    Label::Class(u16::from_le_bytes([b[0], b[1]]))
                }
                LabelKind::Caption => {
                    let b = take(2)?;
                    let n = u16::from_le_bytes([b[0], b[1]]) as usize;
                    Label::Caption(take(n)?.to_vec())
                }
                LabelKind::None => Label::None,
            };
            records.push(Record { pixels, label });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last record", bytes.len() - pos)));
        }
        let ds = Self {
            height,
            width,
            label_kind,
            num_classes,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Records `start..start+n` as a new dataset with the same header.
    pub fn slice(&self, start: usize, n: usize) -> Self {
        Self {
            records: self.records[start..(start + n).min(self.len())].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeColor {
    Red,
    Blue,
    Gold,
}

impl ShapeColor {
    pub fn name(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Blue => "blue",
            ShapeColor::Gold => "gold",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            ShapeColor::Red => [210.0, 40.0, 40.0],
            ShapeColor::Blue => [40.0, 70.0, 210.0],
            ShapeColor::Gold => [225.0, 185.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthShapesSpec {
    pub size: usize,
    pub count: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<ShapeColor>,
    pub captions: bool,
    pub seed: u64,
}

impl SynthShapesSpec {
    /// 3 shapes × 3 colors at `size`×`size`.
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        Self {
            size,
            count,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: vec![ShapeColor::Red, ShapeColor::Blue, ShapeColor::Gold],
            captions: false,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    /// Class id is `shape_index · colors + color_index`.
    pub fn class_parts(&self, class: usize) -> (Shape, ShapeColor) {
        (self.shapes[class / self.colors.len()], self.colors[class % self.colors.len()])
    }

    pub fn caption(&self, class: usize) -> String {
        let (shape, color) = self.class_parts(class);
        format!("a {} {}", color.name(), shape.name())
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Triangle => {
            // Apex up; base at dy = 0.75 r.
            let top = -r;
            let base = 0.75 * r;
            if dy < top || dy > base {
                return false;
            }
            let half = r * (dy - top) / (base - top);
            dx.abs() <= half
        }
    }
}

fn render(spec: &SynthShapesSpec, class: usize, rng: &mut StreamRng) -> Vec<u8> {
    let n = spec.size;
    let s = n as f64;
    let (shape, color) = spec.class_parts(class);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(70.0..120.0));
    let grad: [f64; 2] = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
    let freq = rng.gen_range(0.6..1.4);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let cx = rng.gen_range(0.35..0.65) * s;
    let cy = rng.gen_range(0.35..0.65) * s;
    let r = rng.gen_range(0.25..0.36) * s;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-15.0..15.0));
    let fg: [f64; 3] = std::array::from_fn(|c| color.rgb()[c] + tint[c]);
    let ss = 4;
    let mut out = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let texture = 6.0 * ((x as f64 + y as f64) * freq + phase).sin();
            let mut hits = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    if inside(shape, px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / (ss * ss) as f64;
            for c in 0..3 {
                let bg = base[c] + grad[0] * u + grad[1] * v + texture;
                let value = alpha * fg[c] + (1.0 - alpha) * bg;
                out.push(value.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// One anti-aliased shape per image on a textured background.
pub fn synth_shapes(spec: &SynthShapesSpec) -> Result<DatasetFile> {
    if spec.size == 0 || spec.shapes.is_empty() || spec.colors.is_empty() {
        return Err(Error::Config("synthetic spec needs a positive size, shapes and colors".into()));
    }
    let records = (0..spec.count)
        .map(|i| {
            let mut rng = crate::rng::stream(spec.seed, crate::rng::Purpose::Synth, &[i as u64]);
            let class = rng.gen_range(0..spec.num_classes());
            let pixels = render(spec, class, &mut rng);
            let label = if spec.captions {
                Label::Caption(spec.caption(class).into_bytes())
            } else {
                Label::Class(class as u16)
            };
            Record { pixels, label }
        })
        .collect();
    Ok(DatasetFile {
        height: spec.size,
        width: spec.size,
        label_kind: if spec.captions { LabelKind::Caption } else { LabelKind::Class },
        num_classes: spec.num_classes(),
        records,
    })
}

/// One element of a mixed discrete/soft sequence. `Soft(i)` stands for the
/// i-th image token of the example; its vector is supplied at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedToken {
    Text(u32),
    Soft(usize),
    ClassPrefix { class: u16, slot: u8 },
    NolabelPrefix(u8),
    Boundary(u32),
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageThenText,
    /// Conditioning first (text, class prefix, or nolabel), image second.
    TextThenImage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<MixedToken>,
    /// True where the token is a prediction target.
    pub loss_mask: Vec<bool>,
    /// Rotary position per token; padding has none.
    pub position_ids: Vec<Option<u32>>,
    pub direction: Direction,
    pub dropped: bool,
}

impl PackedSequence {
    /// Assign consecutive positions to every non-padding token.
    pub fn build(tokens: Vec<MixedToken>, loss_mask: Vec<bool>, direction: Direction, dropped: bool) -> Self {
        let mut next = 0u32;
        let position_ids = tokens
            .iter()
            .map(|t| {
                if *t == MixedToken::Pad {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        Self {
            tokens,
            loss_mask,
            position_ids,
            direction,
            dropped,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_image_target(&self) -> bool {
        self.tokens
            .iter()
            .zip(&self.loss_mask)
            .any(|(t, &m)| m && matches!(t, MixedToken::Soft(_)))
    }

    /// Index of the first `Soft` token, if any.
    pub fn image_start(&self) -> Option<usize> {
        self.tokens.iter().position(|t| matches!(t, MixedToken::Soft(_)))
    }

    /// Prefix up to and including the token before the first image token.
    pub fn image_prefix(&self) -> Option<PackedSequence> {
        let start = self.image_start()?;
        Some(Self {
            tokens: self.tokens[..start].to_vec(),
            loss_mask: vec![false; start],
            position_ids: self.position_ids[..start].to_vec(),
            direction: self.direction,
            dropped: self.dropped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackConfig {
    pub image_tokens: usize,
    pub max_text: usize,
    pub num_classes: usize,
    pub cond_drop: f64,
}

impl PackConfig {
    /// Sequence length for every packed example of the given label kind.
    pub fn seq_len(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Caption => self.image_tokens + self.max_text + 2,
            LabelKind::Class | LabelKind::None => PREFIX_LEN + self.image_tokens,
        }
    }
}

fn nolabel_prefix() -> impl Iterator<Item = MixedToken> {
    (0..PREFIX_LEN as u8).map(MixedToken::NolabelPrefix)
}

/// Class prefix, or nolabel prefix when `class` is `None`.
pub fn class_prefix(class: Option<u16>) -> Vec<MixedToken> {
    match class {
        Some(c) => (0..PREFIX_LEN as u8).map(|slot| MixedToken::ClassPrefix { class: c, slot }).collect(),
        None => nolabel_prefix().collect(),
    }
}

/// Text conditioning followed by BOI; `None` gives the nolabel prompt.
pub fn text_prompt(caption: Option<&[u8]>, max_text: usize) -> Result<Vec<MixedToken>> {
    let mut tokens: Vec<MixedToken> = match caption {
        Some(c) => {
            if c.len() > max_text {
                return Err(Error::OutOfRange(format!(
                    "caption of {} bytes exceeds the {max_text}-byte limit",
                    c.len()
                )));
            }
            tokenize(c).into_iter().map(MixedToken::Text).collect()
        }
        None => nolabel_prefix().take(max_text).collect(),
    };
    tokens.resize(max_text, MixedToken::Pad);
    tokens.push(MixedToken::Boundary(BOI));
    Ok(tokens)
}

/// Build the training sequence for one example. Conditioning is replaced
/// by the nolabel prefix with probability `cond_drop`.
pub fn pack_example(
    label: &Label,
    direction: Direction,
    cfg: &PackConfig,
    rng: &mut StreamRng,
) -> Result<PackedSequence> {
    let t = cfg.image_tokens;
    let soft = (0..t).map(MixedToken::Soft);
    match label {
        Label::Class(_) | Label::None => {
            let drop = rng.gen::<f64>() < cfg.cond_drop;
            let class = match label {
                Label::Class(c) if (*c as usize) >= cfg.num_classes => {
                    return Err(Error::OutOfRange(format!("class {c} ≥ {}", cfg.num_classes)))
                }
                Label::Class(c) if !drop => Some(*c),
                _ => None,
            };
            let mut tokens = class_prefix(class);
            tokens.extend(soft);
            let mask = (0..tokens.len()).map(|i| i >= PREFIX_LEN).collect();
            Ok(PackedSequence::build(tokens, mask, Direction::TextThenImage, class.is_none()))
        }
        Label::Caption(caption) => {
            if caption.len() > cfg.max_text {
                return Err(Error::OutOfRange(format!(
                    "caption of {} bytes exceeds the {}-byte limit",
                    caption.len(),
                    cfg.max_text
                )));
            }
            match direction {
                Direction::TextThenImage => {
                    let drop = rng.gen::<f64>() < cfg.cond_drop;
                    let mut tokens = text_prompt(if drop { None } else { Some(caption) }, cfg.max_text)?;
                    let start = tokens.len();
                    tokens.extend(soft);
                    tokens.push(MixedToken::Pad);
                    let mask = (0..tokens.len()).map(|i| i >= start && i < start + t).collect();
                    Ok(PackedSequence::build(tokens, mask, direction, drop))
                }
                Direction::ImageThenText => {
                    let mut tokens: Vec<MixedToken> = soft.collect();
                    tokens.push(MixedToken::Boundary(BOT));
                    let start = tokens.len();
                    tokens.extend(tokenize(caption).into_iter().map(MixedToken::Text));
                    tokens.push(MixedToken::Text(EOS));
                    let end = tokens.len();
                    tokens.resize(t + cfg.max_text + 2, MixedToken::Pad);
                    let mask = (0..tokens.len()).map(|i| i >= start && i < end).collect();
                    Ok(PackedSequence::build(tokens, mask, direction, false))
                }
            }
        }
    }
}

/// Write a binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::Shape(format!("{}x{} image needs {} bytes", width, height, width * height * 3)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

/// Read a binary PPM (P6) with maxval 255; returns (width, height, pixels).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("expected P6, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM number {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM payload is {} bytes, expected {}", data.len(), w * h * 3)));
    }
    Ok((w, h, data.to_vec()))
}

/// Left-right mirror of a row-major RGB image.
pub fn flip_horizontal(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len());
    for y in 0..height {
        for x in (0..width).rev() {
            let i = (y * width + x) * 3;
            out.extend_from_slice(&pixels[i..i + 3]);
        }
    }
    out
}
