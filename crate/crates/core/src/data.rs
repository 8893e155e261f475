//! Synthetic editing dataset: coloured rectangles on a grey background,
//! word-level instructions, exact target images, and a binary file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{EditError, Result};
use crate::image::{Image, Rect, RegionSet};

/// Instruction vocabulary; a word's id is its index.
pub const VOCAB: &[&str] = &[
    "<pad>", "<bos>", "add", "remove", "make", "the", "a", "left", "right", "top", "bottom", "box", "at",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
];

const FIRST_COLOUR: usize = 13;

pub const PALETTE: &[(&str, [f32; 3])] = &[
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("orange", [1.0, 0.55, 0.0]),
    ("purple", [0.45, 0.1, 0.6]),
];

pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>"))
        .filter(|w| *w != "<bos>")
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    Add,
    Remove,
    ChangeColor,
}

impl EditKind {
    fn code(self) -> u8 {
        match self {
            Self::Add => 0,
            Self::Remove => 1,
            Self::ChangeColor => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Add),
            1 => Some(Self::Remove),
            2 => Some(Self::ChangeColor),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub source: Image,
    pub target: Image,
    /// Word ids starting with `<bos>`.
    pub instruction: Vec<usize>,
    /// One box per shape in the source image.
    pub boxes: RegionSet,
    pub edit_kind: EditKind,
    /// The only area where source and target may differ.
    pub edit_box: Rect,
    /// The target shape shares its colour with another shape, so only a
    /// positional word identifies it.
    pub region_critical: bool,
}

struct Shape {
    rect: Rect,
    colour: usize,
}

fn colour_word(c: usize) -> usize {
    FIRST_COLOUR + c
}

/// Positional word telling `target` apart from `other`.
fn position_word(target: &Rect, other: &Rect) -> usize {
    let (tx, ty) = target.center();
    let (ox, oy) = other.center();
    let word = if (tx - ox).abs() >= (ty - oy).abs() {
        if tx < ox {
            "left"
        } else {
            "right"
        }
    } else if ty < oy {
        "top"
    } else {
        "bottom"
    };
    token_id(word).expect("positional word in vocabulary")
}

fn place_shapes(rng: &mut ChaCha8Rng, size: usize, count: usize, colours: &[usize]) -> Option<Vec<Shape>> {
    let min = (size / 5).max(2);
    let max = (size / 2).max(min + 1);
    let mut shapes: Vec<Shape> = Vec::new();
    for &colour in colours.iter().take(count) {
        let mut placed = false;
        for _ in 0..200 {
            let w = rng.random_range(min..=max);
            let h = rng.random_range(min..=max);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            let rect = Rect::new(x0, y0, x0 + w, y0 + h);
            if shapes.iter().all(|s| !s.rect.near(&rect, 1)) {
                shapes.push(Shape { rect, colour });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(shapes)
}

fn render(size: usize, shapes: &[Shape]) -> Image {
    let mut img = Image::filled(size, size, BACKGROUND);
    for s in shapes {
        img.fill_rect(&s.rect, PALETTE[s.colour].1);
    }
    img
}

fn generate_one(rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Option<DatasetRecord> {
    let size = cfg.image_size;
    let palette = cfg.palette_size;
    let critical = cfg.region_critical_only;
    let count = if critical {
        rng.random_range(2.max(cfg.shapes_min)..=cfg.shapes_max.max(2))
    } else {
        rng.random_range(cfg.shapes_min..=cfg.shapes_max)
    };
    let mut colours: Vec<usize> = (0..count).map(|_| rng.random_range(0..palette)).collect();
    if critical {
        colours[1] = colours[0];
    }
    // at most two shapes per colour, so one positional word always suffices
    for i in 2..count {
        while colours[..i].iter().filter(|&&c| c == colours[i]).count() >= 2 {
            colours[i] = rng.random_range(0..palette);
        }
    }
    let shapes = place_shapes(rng, size, count, &colours)?;
    let kind = if critical {
        if rng.random_bool(0.5) {
            EditKind::ChangeColor
        } else {
            EditKind::Remove
        }
    } else {
        match rng.random_range(0..3) {
            0 => EditKind::Add,
            1 => EditKind::Remove,
            _ => EditKind::ChangeColor,
        }
    };
    let source = render(size, &shapes);
    let boxes = RegionSet::oracle(shapes.iter().map(|s| s.rect).collect());
    let bos = token_id("<bos>").unwrap();
    let word = |w: &str| token_id(w).unwrap();

    if kind == EditKind::Add {
        let colour = rng.random_range(0..palette);
        let half = size / 2;
        let side = (size / 4).max(1);
        let quadrant = rng.random_range(0..4);
        let (qy, qx) = (quadrant / 2, quadrant % 2);
        let off = (half - side) / 2;
        let rect = Rect::new(qx * half + off, qy * half + off, qx * half + off + side, qy * half + off + side);
        if shapes.iter().any(|s| s.rect.near(&rect, 1)) {
            return None;
        }
        let mut target = source.clone();
        target.fill_rect(&rect, PALETTE[colour].1);
        let vertical = if qy == 0 { "top" } else { "bottom" };
        let horizontal = if qx == 0 { "left" } else { "right" };
        let instruction = vec![
            bos,
            word("add"),
            word("a"),
            colour_word(colour),
            word("box"),
            word("at"),
            word(vertical),
            word(horizontal),
        ];
        return Some(DatasetRecord {
            source,
            target,
            instruction,
            boxes,
            edit_kind: kind,
            edit_box: rect,
            region_critical: false,
        });
    }

    let idx = if critical { rng.random_range(0..2) } else { rng.random_range(0..shapes.len()) };
    let chosen = &shapes[idx];
    let sibling = shapes
        .iter()
        .enumerate()
        .find(|(i, s)| *i != idx && s.colour == chosen.colour)
        .map(|(_, s)| s);
    let mut descriptor = vec![word("the")];
    if let Some(other) = sibling {
        descriptor.push(position_word(&chosen.rect, &other.rect));
    }
    descriptor.push(colour_word(chosen.colour));
    descriptor.push(word("box"));

    let mut target_shapes: Vec<Shape> = shapes.iter().map(|s| Shape { rect: s.rect, colour: s.colour }).collect();
    let mut instruction = vec![bos];
    match kind {
        EditKind::Remove => {
            target_shapes.remove(idx);
            instruction.push(word("remove"));
            instruction.extend(descriptor);
        }
        _ => {
            let shift = rng.random_range(1..palette);
            let new_colour = (chosen.colour + shift) % palette;
            target_shapes[idx].colour = new_colour;
            instruction.push(word("make"));
            instruction.extend(descriptor);
            instruction.push(colour_word(new_colour));
        }
    }
    Some(DatasetRecord {
        target: render(size, &target_shapes),
        source,
        instruction,
        boxes,
        edit_kind: kind,
        edit_box: chosen.rect,
        region_critical: sibling.is_some(),
    })
}

/// `cfg.records` records, deterministic in `seed`.
pub fn generate_dataset(cfg: &RunConfig, seed: u64) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    if cfg.image_size < 8 {
        return Err(EditError::config(format!("image_size {} too small for the shape generator", cfg.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.records);
    let mut attempts = 0usize;
    while out.len() < cfg.records {
        attempts += 1;
        if attempts > 1000 * cfg.records.max(1) {
            return Err(EditError::config("could not place shapes; image too small for the shape count"));
        }
        if let Some(r) = generate_one(&mut rng, cfg) {
            out.push(r);
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"REDS";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_pixels(out: &mut Vec<u8>, img: &Image) {
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_rect(out: &mut Vec<u8>, r: &Rect) {
    for v in [r.x0, r.y0, r.x1, r.y1] {
        put_u32(out, v);
    }
}

pub fn encode_dataset(records: &[DatasetRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, records.len());
    let (h, w) = records.first().map_or((0, 0), |r| (r.source.height, r.source.width));
    put_u32(&mut out, h);
    put_u32(&mut out, w);
    put_u32(&mut out, VOCAB.len());
    for word in VOCAB {
        put_u32(&mut out, word.len());
        out.extend_from_slice(word.as_bytes());
    }
    for r in records {
        put_pixels(&mut out, &r.source);
        put_pixels(&mut out, &r.target);
        put_u32(&mut out, r.instruction.len());
        for &id in &r.instruction {
            put_u32(&mut out, id);
        }
        put_u32(&mut out, r.boxes.len());
        for b in &r.boxes.boxes {
            put_rect(&mut out, b);
        }
        out.push(r.edit_kind.code());
        put_rect(&mut out, &r.edit_box);
        out.push(r.region_critical as u8);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(EditError::Format { kind: "dataset", msg: "unexpected end of file".into() });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn image(&mut self, h: usize, w: usize) -> Result<Image> {
        let raw = self.take(h * w * 3 * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Image { height: h, width: w, data })
    }

    fn rect(&mut self) -> Result<Rect> {
        Ok(Rect::new(self.u32()?, self.u32()?, self.u32()?, self.u32()?))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<DatasetRecord>> {
    let bad = |msg: String| EditError::Format { kind: "dataset", msg };
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let (h, w) = (r.u32()?, r.u32()?);
    let vocab_len = r.u32()?;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        let n = r.u32()?;
        vocab.push(String::from_utf8(r.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))?);
    }
    if vocab.iter().map(String::as_str).ne(VOCAB.iter().copied()) {
        return Err(bad("vocabulary table differs from this build".into()));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let source = r.image(h, w)?;
        let target = r.image(h, w)?;
        let n = r.u32()?;
        let instruction = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if let Some(&id) = instruction.iter().find(|&&id| id >= VOCAB.len()) {
            return Err(bad(format!("token id {id} outside the vocabulary")));
        }
        let nb = r.u32()?;
        let boxes = (0..nb).map(|_| r.rect()).collect::<Result<Vec<_>>>()?;
        for b in &boxes {
            b.check(h, w)?;
        }
        let edit_kind = EditKind::from_code(r.u8()?).ok_or_else(|| bad("bad edit kind".into()))?;
        let edit_box = r.rect()?;
        edit_box.check(h, w)?;
        let region_critical = r.u8()? != 0;
        records.push(DatasetRecord {
            source,
            target,
            instruction,
            boxes: RegionSet::oracle(boxes),
            edit_kind,
            edit_box,
            region_critical,
        });
    }
    if !r.bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_dataset(records))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
