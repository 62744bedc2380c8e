//! Preference-example schema, the synthetic grid-world task generator, and
//! JSON-Lines persistence.
//!
//! A synthetic example asks for the attribute of one object in a grid image.
//! The revised response states the true attribute with a fixed template; the
//! hallucinated response is the same sentence with a wrong attribute token.
//! Target spans are recovered by diffing the two token sequences rather than
//! copied from generator bookkeeping.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PreferencePair;
use crate::model::{BoundingBox, Cell, GridImage, Token};
use crate::targeting::{extract_target_spans, remove_spans, SpanAnnotation};

/// Token ids of the synthetic task language.
///
/// Layout: seven function words after `PAD/BOS/EOS`, then one token per
/// object class, attribute, row index and column index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub object_classes: usize,
    pub attributes: usize,
    pub grid_size: usize,
}

impl Vocab {
    pub const PAD: Token = 0;
    pub const BOS: Token = 1;
    pub const EOS: Token = 2;
    pub const WHAT: Token = 3;
    pub const THE: Token = 4;
    pub const ATTRIBUTE: Token = 5;
    pub const OF: Token = 6;
    pub const AT: Token = 7;
    pub const IS: Token = 8;
    const FIXED: usize = 9;

    pub fn new(object_classes: usize, attributes: usize, grid_size: usize) -> Self {
        Self {
            object_classes,
            attributes,
            grid_size,
        }
    }

    pub fn size(&self) -> usize {
        Self::FIXED + self.object_classes + self.attributes + 2 * self.grid_size
    }

    pub fn object(&self, class: u32) -> Token {
        (Self::FIXED + class as usize) as Token
    }

    pub fn attribute(&self, attr: u32) -> Token {
        (Self::FIXED + self.object_classes + attr as usize) as Token
    }

    pub fn row(&self, r: usize) -> Token {
        (Self::FIXED + self.object_classes + self.attributes + r) as Token
    }

    pub fn col(&self, c: usize) -> Token {
        (Self::FIXED + self.object_classes + self.attributes + self.grid_size + c) as Token
    }

    /// Inverse of [`Vocab::attribute`].
    pub fn attribute_of(&self, tok: Token) -> Option<u32> {
        let base = Self::FIXED + self.object_classes;
        let t = tok as usize;
        (base..base + self.attributes).contains(&t).then(|| (t - base) as u32)
    }

    /// `<bos> what attribute of OBJ at ROW COL`
    pub fn question(&self, class: u32, row: usize, col: usize) -> Vec<Token> {
        vec![
            Self::BOS,
            Self::WHAT,
            Self::ATTRIBUTE,
            Self::OF,
            self.object(class),
            Self::AT,
            self.row(row),
            self.col(col),
        ]
    }

    /// `the attribute of OBJ at ROW COL is ATTR <eos>`
    pub fn answer(&self, class: u32, row: usize, col: usize, attr: u32) -> Vec<Token> {
        vec![
            Self::THE,
            Self::ATTRIBUTE,
            Self::OF,
            self.object(class),
            Self::AT,
            self.row(row),
            self.col(col),
            Self::IS,
            self.attribute(attr),
            Self::EOS,
        ]
    }

    /// Position of the attribute token inside [`Vocab::answer`].
    pub const ANSWER_ATTR_POS: usize = 8;
}

/// One preference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub id: String,
    pub image: GridImage,
    pub question: Vec<Token>,
    pub y_h: Vec<Token>,
    pub y_r: Vec<Token>,
    #[serde(flatten)]
    pub annotation: SpanAnnotation,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_attr: Option<u32>,
}

impl PreferenceExample {
    /// Both responses restricted to their target spans and truncated after
    /// the last one; the revised response is the preferred side.
    pub fn target_pair(&self) -> Result<PreferencePair> {
        PreferencePair::target_restricted(
            self.image.clone(),
            self.question.clone(),
            &self.y_r,
            &self.y_h,
            &self.annotation,
            Some(self.bbox),
        )
    }

    /// The untouched responses, revised preferred over hallucinated.
    pub fn full_pair(&self) -> PreferencePair {
        let mut p = PreferencePair::new(
            self.image.clone(),
            self.question.clone(),
            self.y_r.clone(),
            self.y_h.clone(),
        );
        p.bbox = Some(self.bbox);
        p
    }
}

/// One failed invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every structural invariant of an example. Returns all violations.
pub fn validate_example(ex: &PreferenceExample) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut v = |field: &'static str, message: String| out.push(Violation { field, message });

    if ex.id.is_empty() {
        v("id", "empty id".into());
    }
    if ex.image.g == 0 || ex.image.cells.len() != ex.image.g * ex.image.g {
        v("image", format!("{} cells for g = {}", ex.image.cells.len(), ex.image.g));
    }
    if ex.y_h.is_empty() {
        v("y_h", "empty response".into());
    }
    if ex.y_r.is_empty() {
        v("y_r", "empty response".into());
    }
    if ex.y_h == ex.y_r {
        v("y_h", "identical to y_r".into());
    }
    if let Err(e) = ex.bbox.validate(ex.image.g) {
        v("bbox", e.to_string());
    }
    if ex.annotation.is_empty() {
        v("spans_h", "no target spans".into());
    }
    match ex.annotation.validate(ex.y_h.len(), ex.y_r.len()) {
        Err((field, message)) => v(field, message),
        Ok(()) => {
            let rest_h = remove_spans(&ex.y_h, &ex.annotation.spans_h);
            let rest_r = remove_spans(&ex.y_r, &ex.annotation.spans_r);
            if rest_h != rest_r {
                v("spans_h", "responses differ outside the target spans".into());
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Parameters of the synthetic grounding task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub grid_size: usize,
    pub object_classes: usize,
    pub attributes: usize,
    pub vocab_size: usize,
    pub dataset_size: usize,
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            object_classes: 4,
            attributes: 8,
            vocab_size: 32,
            dataset_size: 512,
            distractor_count: 3,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.object_classes, self.attributes, self.grid_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::config("grid_size", "must be >= 1"));
        }
        if self.object_classes < 2 {
            return Err(Error::config(
                "object_classes",
                "must be >= 2 (class 0 marks empty cells)",
            ));
        }
        if self.attributes < 2 {
            return Err(Error::config(
                "attributes",
                "must be >= 2 so that a wrong attribute exists",
            ));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be >= 1"));
        }
        let cells = self.grid_size * self.grid_size;
        if self.distractor_count + 1 > cells {
            return Err(Error::config(
                "distractor_count",
                format!("{} objects do not fit in {cells} cells", self.distractor_count + 1),
            ));
        }
        let needed = self.vocab().size();
        if self.vocab_size < needed {
            return Err(Error::config(
                "vocab_size",
                format!("templates need at least {needed} tokens"),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct")
    }
}

/// Generates `cfg.dataset_size` examples, deterministic in `cfg`.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<Vec<PreferenceExample>> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let g = cfg.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions: Vec<usize> = (0..g * g).collect();
    let mut out = Vec::with_capacity(cfg.dataset_size);

    for i in 0..cfg.dataset_size {
        let mut image = GridImage::filled(g, Cell { obj: 0, attr: 0 });
        let (chosen, _) = positions.partial_shuffle(&mut rng, cfg.distractor_count + 1);
        for &p in chosen.iter() {
            image.cells[p] = Cell {
                obj: rng.random_range(1..cfg.object_classes as u32),
                attr: rng.random_range(0..cfg.attributes as u32),
            };
        }
        let target = chosen[0];
        let (row, col) = (target / g, target % g);
        let cell = image.cells[target];
        let wrong = hallucinated_attribute(&mut rng, &image, &chosen[1..], cell.attr, cfg.attributes);

        let question = vocab.question(cell.obj, row, col);
        let y_r = vocab.answer(cell.obj, row, col, cell.attr);
        let y_h = vocab.answer(cell.obj, row, col, wrong);
        let annotation = extract_target_spans(&y_h, &y_r)?;
        out.push(PreferenceExample {
            id: format!("syn-{}-{i:06}", cfg.seed),
            image,
            question,
            y_h,
            y_r,
            annotation,
            bbox: BoundingBox::cell(row, col),
            gt_attr: Some(cell.attr),
        });
    }
    Ok(out)
}

/// The wrong attribute a grounding failure would produce: the attribute of a
/// randomly chosen distractor object, so that `y_h` reads from the wrong
/// region of the image. Falls back to a uniformly drawn wrong attribute when
/// every distractor shares the true one.
fn hallucinated_attribute(
    rng: &mut ChaCha8Rng,
    image: &GridImage,
    distractors: &[usize],
    truth: u32,
    attributes: usize,
) -> u32 {
    let candidates: Vec<u32> = distractors
        .iter()
        .map(|&p| image.cells[p].attr)
        .filter(|&a| a != truth)
        .collect();
    if let Some(&a) = candidates.choose(rng) {
        return a;
    }
    let wrong = rng.random_range(0..attributes as u32 - 1);
    if wrong >= truth {
        wrong + 1
    } else {
        wrong
    }
}

pub fn write_dataset(path: &Path, examples: &[PreferenceExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(w: &mut W, examples: &[PreferenceExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferenceExample>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Parses JSON-Lines, validating each record. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferenceExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: PreferenceExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Err(violations) = validate_example(&ex) {
            let first = &violations[0];
            return Err(Error::Validation {
                field: first.field.to_string(),
                reason: format!("line {}: {}", i + 1, first.message),
            });
        }
        out.push(ex);
    }
    Ok(out)
}
