//! Synthetic multimodal corpora with known ground truth.
//!
//! Every sample carries three colored object crops. Two of them share a
//! *dominant hue*, the third is a distractor; the full image tiles the three
//! crops into a 2x2 grid with a gray fourth quadrant.
//!
//! * NER: each entity is either *textual* (its words come from a type-specific
//!   pool, so the words alone decide the type) or *visual* (its words come
//!   from a shared ambiguous pool and its type is the dominant hue).
//! * RE: the relation is a seeded lookup on `(head class, tail class)`; for a
//!   `visual_dependency` fraction of class pairs the lookup also keys on the
//!   dominant hue.
//!
//! File format: one JSON object per line. The first line is a header
//! `{"format":"mmie-corpus","version":1}`, each following line is a [`Sample`]
//! with grids stored as `{"shape":[h,w,c],"data":[...]}`.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Error, Result};
use crate::labels::{RelationSet, TagSet};

pub const NUM_OBJECTS: usize = 3;
const POOL_SIZE: usize = 8;
const MIN_FILLER: usize = 16;
const DEFAULT_ENTITY_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];
const RE_HUES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Re,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "re" => Ok(Task::Re),
            _ => Err(config_err!("unknown task {s:?} (expected ner or re)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Re => "re",
        })
    }
}

/// A `height x width x channels` float grid, row-major with channels fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            shape: [h, w, c],
            data: vec![0.0; h * w * c],
        }
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
    }

    pub fn is_consistent(&self) -> bool {
        self.shape.iter().product::<usize>() == self.data.len()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels();
        let o = (y * self.width() + x) * c;
        &self.data[o..o + c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let c = self.channels();
        let o = (y * self.width() + x) * c;
        &mut self.data[o..o + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub tokens: Vec<usize>,
    pub image: Grid,
    pub objects: Vec<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ner_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<usize>,
}

impl Sample {
    /// Structural invariants that hold for every well-formed record.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(invalid!("{}: empty token sequence", self.id));
        }
        if self.objects.len() != NUM_OBJECTS {
            return Err(invalid!("{}: expected {NUM_OBJECTS} object crops, got {}", self.id, self.objects.len()));
        }
        if !self.image.is_consistent() || self.objects.iter().any(|o| !o.is_consistent()) {
            return Err(invalid!("{}: grid data does not match its shape", self.id));
        }
        if self.objects.iter().any(|o| o.shape != self.objects[0].shape) {
            return Err(invalid!("{}: object crops differ in shape", self.id));
        }
        match self.task {
            Task::Ner => {
                let labels = self
                    .ner_labels
                    .as_ref()
                    .ok_or_else(|| invalid!("{}: NER sample without labels", self.id))?;
                if labels.len() != n {
                    return Err(invalid!("{}: {} labels for {n} tokens", self.id, labels.len()));
                }
                if !bio_string_is_valid(labels) {
                    return Err(invalid!("{}: labels are not valid BIO", self.id));
                }
            }
            Task::Re => {
                let (Some(h), Some(t), Some(_)) = (self.head_span, self.tail_span, self.relation) else {
                    return Err(invalid!("{}: RE sample needs head_span, tail_span and relation", self.id));
                };
                for (s, e) in [h, t] {
                    if s >= e || e > n {
                        return Err(invalid!("{}: span ({s}, {e}) out of bounds for {n} tokens", self.id));
                    }
                }
                if h.0 < t.1 && t.0 < h.1 {
                    return Err(invalid!("{}: head and tail spans overlap", self.id));
                }
            }
        }
        Ok(())
    }
}

/// BIO check on label strings, independent of any tag alphabet.
pub fn bio_string_is_valid(labels: &[String]) -> bool {
    let mut prev: Option<&str> = None;
    for l in labels {
        if l == "O" {
            prev = None;
            continue;
        }
        let Some((p, ty)) = l.split_once('-') else { return false };
        match p {
            "B" => prev = Some(ty),
            "I" if prev == Some(ty) => {}
            _ => return false,
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub num_entity_types: usize,
    pub num_relation_types: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub seed: u64,
    pub visual_dependency: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub image_size: usize,
    pub object_size: usize,
    pub channels: usize,
}

impl CorpusSpec {
    pub fn new(task: Task) -> Self {
        CorpusSpec {
            task,
            vocab_size: 200,
            num_entity_types: 4,
            num_relation_types: 8,
            num_train: 4000,
            num_val: 1000,
            num_test: 1000,
            seed: 7,
            visual_dependency: 0.5,
            min_len: 6,
            max_len: 14,
            image_size: 16,
            object_size: 8,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return Err(config_err!("split sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.visual_dependency) {
            return Err(config_err!("visual_dependency must lie in [0, 1]"));
        }
        if self.num_entity_types == 0 {
            return Err(config_err!("num_entity_types must be positive"));
        }
        if self.task == Task::Ner && self.num_entity_types < 2 {
            return Err(config_err!("NER needs at least two entity types so hues can disambiguate"));
        }
        if self.task == Task::Re && self.num_relation_types < 2 {
            return Err(config_err!("num_relation_types must be at least 2"));
        }
        let needed = (self.num_entity_types + 1) * POOL_SIZE + MIN_FILLER;
        if self.vocab_size < needed {
            return Err(config_err!("vocab_size {} too small, need at least {needed}", self.vocab_size));
        }
        if self.min_len < 5 || self.min_len > self.max_len || self.max_len > 32 {
            return Err(config_err!("sentence lengths must satisfy 5 <= min_len <= max_len <= 32"));
        }
        if self.channels != 3 {
            return Err(config_err!("only 3-channel images are generated"));
        }
        if self.object_size == 0 || self.image_size != 2 * self.object_size {
            return Err(config_err!("image_size must be twice object_size (2x2 tiling)"));
        }
        Ok(())
    }

    pub fn num_hues(&self) -> usize {
        match self.task {
            Task::Ner => self.num_entity_types,
            Task::Re => RE_HUES,
        }
    }

    pub fn entity_types(&self) -> Vec<String> {
        (0..self.num_entity_types)
            .map(|i| match DEFAULT_ENTITY_TYPES.get(i) {
                Some(n) => (*n).to_owned(),
                None => format!("T{}", i + 1),
            })
            .collect()
    }

    pub fn tag_set(&self) -> TagSet {
        TagSet::new(self.entity_types()).expect("generated names are valid")
    }

    /// `None` followed by `rel_01`, `rel_02`, ...
    pub fn relation_set(&self) -> RelationSet {
        let names = std::iter::once(RelationSet::NONE.to_owned())
            .chain((1..self.num_relation_types).map(|i| format!("rel_{i:02}")))
            .collect();
        RelationSet::new(names).expect("generated names are valid")
    }

    fn ambiguous_pool(&self) -> std::ops::Range<usize> {
        let s = self.num_entity_types * POOL_SIZE;
        s..s + POOL_SIZE
    }

    fn type_pool(&self, t: usize) -> std::ops::Range<usize> {
        t * POOL_SIZE..(t + 1) * POOL_SIZE
    }

    fn filler_pool(&self) -> std::ops::Range<usize> {
        (self.num_entity_types + 1) * POOL_SIZE..self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// RGB palette; the first four hues are the primaries plus yellow, later ones
/// are spread around the color wheel.
pub fn palette(n: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
    (0..n)
        .map(|i| {
            if i < BASE.len() {
                return BASE[i];
            }
            let h = (i as f64 + 0.5) / n as f64 * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            match h as usize {
                0 => [1.0, x, 0.0],
                1 => [x, 1.0, 0.0],
                2 => [0.0, 1.0, x],
                3 => [0.0, x, 1.0],
                4 => [x, 0.0, 1.0],
                _ => [1.0, 0.0, x],
            }
        })
        .collect()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 100.0).round() / 100.0
}

struct RelationTables {
    visual_pair: Vec<bool>,
    text: Vec<usize>,
    visual: Vec<usize>,
}

impl RelationTables {
    fn new(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let t = spec.num_entity_types;
        let pairs = t * t;
        let n_visual = (spec.visual_dependency * pairs as f64).round() as usize;
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(rng);
        let mut visual_pair = vec![false; pairs];
        for &p in &order[..n_visual] {
            visual_pair[p] = true;
        }
        let r = spec.num_relation_types;
        let text = (0..pairs).map(|_| rng.random_range(0..r)).collect();
        let visual = (0..pairs * spec.num_hues()).map(|_| rng.random_range(0..r)).collect();
        RelationTables {
            visual_pair,
            text,
            visual,
        }
    }

    fn relation(&self, spec: &CorpusSpec, head: usize, tail: usize, hue: usize) -> usize {
        let p = head * spec.num_entity_types + tail;
        if self.visual_pair[p] {
            self.visual[p * spec.num_hues() + hue]
        } else {
            self.text[p]
        }
    }
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    colors: Vec<[f64; 3]>,
    tables: Option<RelationTables>,
}

impl Generator<'_> {
    fn crop(&self, hue: usize, rng: &mut ChaCha8Rng) -> Grid {
        let s = self.spec.object_size;
        let mut g = Grid::zeros(s, s, 3);
        let color = self.colors[hue];
        for y in 0..s {
            for x in 0..s {
                let bright = rng.random_range(0.6..1.0);
                for (c, v) in g.pixel_mut(y, x).iter_mut().enumerate() {
                    *v = quantize(color[c] * bright + rng.random_range(0.0..0.1));
                }
            }
        }
        g
    }

    /// Three crops (two share `hue`) and the tiled full image.
    fn visuals(&self, hue: usize, rng: &mut ChaCha8Rng) -> (Grid, Vec<Grid>) {
        let nh = self.colors.len();
        let distractor = (hue + rng.random_range(1..nh)) % nh;
        let mut hues = [hue, hue, distractor];
        hues.shuffle(rng);
        let objects: Vec<Grid> = hues.iter().map(|&h| self.crop(h, rng)).collect();

        let s = self.spec.object_size;
        let mut image = Grid::zeros(2 * s, 2 * s, 3);
        let mut quadrants = [0usize, 1, 2, 3];
        quadrants.shuffle(rng);
        for (q, slot) in quadrants.iter().enumerate() {
            let (oy, ox) = ((slot / 2) * s, (slot % 2) * s);
            for y in 0..s {
                for x in 0..s {
                    let px = image.pixel_mut(oy + y, ox + x);
                    if q < NUM_OBJECTS {
                        px.copy_from_slice(objects[q].pixel(y, x));
                    } else {
                        let gray = rng.random_range(0.3..0.5);
                        px.iter_mut().for_each(|v| *v = quantize(gray));
                    }
                }
            }
        }
        (image, objects)
    }

    fn pick(range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(range)
    }

    fn ner_sample(&self, id: String, rng: &mut ChaCha8Rng) -> Sample {
        let spec = self.spec;
        let hue = rng.random_range(0..self.colors.len());
        let (image, objects) = self.visuals(hue, rng);
        let n = rng.random_range(spec.min_len..=spec.max_len);

        let mut lens: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=2)).collect();
        while lens.iter().sum::<usize>() + lens.len().saturating_sub(1) > n {
            lens.pop();
        }
        let e = lens.len();
        let fillers = n - lens.iter().sum::<usize>();
        let mut gaps = vec![0usize; e + 1];
        for g in gaps.iter_mut().take(e).skip(1) {
            *g = 1;
        }
        for _ in 0..fillers - e.saturating_sub(1) {
            gaps[rng.random_range(0..=e)] += 1;
        }

        let mut tokens = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let types = spec.entity_types();
        for (k, &len) in lens.iter().enumerate() {
            for _ in 0..gaps[k] {
                tokens.push(Self::pick(spec.filler_pool(), rng));
                labels.push("O".to_owned());
            }
            let visual = rng.random_bool(spec.visual_dependency);
            let (ty, pool) = if visual {
                (hue, spec.ambiguous_pool())
            } else {
                let t = rng.random_range(0..spec.num_entity_types);
                (t, spec.type_pool(t))
            };
            for i in 0..len {
                tokens.push(Self::pick(pool.clone(), rng));
                labels.push(format!("{}-{}", if i == 0 { "B" } else { "I" }, types[ty]));
            }
        }
        for _ in 0..gaps[e] {
            tokens.push(Self::pick(spec.filler_pool(), rng));
            labels.push("O".to_owned());
        }
        Sample {
            id,
            task: Task::Ner,
            tokens,
            image,
            objects,
            ner_labels: Some(labels),
            head_span: None,
            tail_span: None,
            relation: None,
        }
    }

    fn re_sample(&self, id: String, rng: &mut ChaCha8Rng) -> Sample {
        let spec = self.spec;
        let hue = rng.random_range(0..self.colors.len());
        let (image, objects) = self.visuals(hue, rng);
        let n = rng.random_range(spec.min_len..=spec.max_len);
        let (hc, tc) = (
            rng.random_range(0..spec.num_entity_types),
            rng.random_range(0..spec.num_entity_types),
        );
        let (hl, tl) = (rng.random_range(1..=2), rng.random_range(1..=2));

        // first entity, >= 1 filler gap, second entity, rest fillers around them
        let free = n - hl - tl - 1;
        let lead = rng.random_range(0..=free);
        let mid = 1 + rng.random_range(0..=free - lead);
        let head_first = rng.random_bool(0.5);
        let (l1, l2) = if head_first { (hl, tl) } else { (tl, hl) };
        let first = (lead, lead + l1);
        let second = (first.1 + mid, first.1 + mid + l2);
        let (head_span, tail_span) = if head_first { (first, second) } else { (second, first) };

        let mut tokens: Vec<usize> = (0..n).map(|_| Self::pick(spec.filler_pool(), rng)).collect();
        for ((s, e), class) in [(head_span, hc), (tail_span, tc)] {
            for tok in &mut tokens[s..e] {
                *tok = Self::pick(spec.type_pool(class), rng);
            }
        }
        let tables = self.tables.as_ref().expect("RE generator has tables");
        Sample {
            id,
            task: Task::Re,
            tokens,
            image,
            objects,
            ner_labels: None,
            head_span: Some(head_span),
            tail_span: Some(tail_span),
            relation: Some(tables.relation(spec, hc, tc, hue)),
        }
    }

    fn split(&self, name: &str, stream: u64, count: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        (0..count)
            .map(|i| {
                let id = format!("{name}-{i:06}");
                match self.spec.task {
                    Task::Ner => self.ner_sample(id, &mut rng),
                    Task::Re => self.re_sample(id, &mut rng),
                }
            })
            .collect()
    }
}

/// Generates train/val/test splits. Output is a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut table_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tables = (spec.task == Task::Re).then(|| RelationTables::new(spec, &mut table_rng));
    let gen = Generator {
        spec,
        colors: palette(spec.num_hues()),
        tables,
    };
    Ok(Corpus {
        train: gen.split("train", 1, spec.num_train),
        val: gen.split("val", 2, spec.num_val),
        test: gen.split("test", 3, spec.num_test),
    })
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Header {
    format: String,
    version: u32,
}

const FORMAT: &str = "mmie-corpus";

pub fn write_corpus(samples: &[Sample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT.to_owned(),
        version: 1,
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if !saw_header {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            if h.format != FORMAT || h.version != 1 {
                return Err(parse_err(lineno, format!("unsupported corpus format {} v{}", h.format, h.version)));
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        s.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
        samples.push(s);
    }
    if !saw_header {
        return Err(parse_err(1, "missing header line".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> CorpusSpec {
        CorpusSpec {
            num_train: 60,
            num_val: 10,
            num_test: 10,
            ..CorpusSpec::new(task)
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for task in [Task::Ner, Task::Re] {
            let a = generate_corpus(&small(task)).unwrap();
            let b = generate_corpus(&small(task)).unwrap();
            assert_eq!(a, b);
            let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
            write_corpus(&a.train, &pa).unwrap();
            write_corpus(&b.train, &pb).unwrap();
            assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_corpus(&small(Task::Ner)).unwrap();
        let b = generate_corpus(&CorpusSpec { seed: 8, ..small(Task::Ner) }).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn samples_satisfy_invariants() {
        for task in [Task::Ner, Task::Re] {
            let c = generate_corpus(&small(task)).unwrap();
            for s in c.train.iter().chain(&c.val).chain(&c.test) {
                s.validate().unwrap();
                assert_eq!(s.objects.len(), 3);
                assert_eq!(s.image.shape, [16, 16, 3]);
                assert!(s.tokens.iter().all(|&t| t < 200));
            }
        }
    }

    #[test]
    fn text_only_ner_labels_are_a_function_of_tokens() {
        let spec = CorpusSpec {
            visual_dependency: 0.0,
            num_train: 400,
            ..small(Task::Ner)
        };
        let c = generate_corpus(&spec).unwrap();
        // every token id maps to exactly one entity type or to O
        let mut seen: std::collections::HashMap<usize, String> = Default::default();
        for s in &c.train {
            for (tok, lab) in s.tokens.iter().zip(s.ner_labels.as_ref().unwrap()) {
                let ty = lab.split_once('-').map_or("O", |(_, t)| t).to_owned();
                let prev = seen.entry(*tok).or_insert_with(|| ty.clone());
                assert_eq!(*prev, ty, "token {tok} labelled inconsistently");
            }
        }
    }

    #[test]
    fn visual_entities_take_the_dominant_hue() {
        let spec = CorpusSpec {
            visual_dependency: 1.0,
            ..small(Task::Ner)
        };
        let colors = palette(spec.num_hues());
        let types = spec.entity_types();
        for s in &generate_corpus(&spec).unwrap().train {
            // dominant hue from per-crop mean colors
            let means: Vec<[f64; 3]> = s
                .objects
                .iter()
                .map(|o| {
                    let mut m = [0.0; 3];
                    for p in o.data.chunks(3) {
                        for c in 0..3 {
                            m[c] += p[c] / 64.0;
                        }
                    }
                    m
                })
                .collect();
            let nearest = |m: &[f64; 3]| {
                (0..colors.len())
                    .min_by(|&a, &b| {
                        let d = |k: usize| (0..3).map(|c| (colors[k][c] * 0.8 + 0.05 - m[c]).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap()
            };
            let hues: Vec<usize> = means.iter().map(nearest).collect();
            let dominant = if hues[0] == hues[1] || hues[0] == hues[2] { hues[0] } else { hues[1] };
            for lab in s.ner_labels.as_ref().unwrap() {
                if let Some((_, ty)) = lab.split_once('-') {
                    assert_eq!(ty, types[dominant]);
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = [
            CorpusSpec { num_train: 0, ..small(Task::Ner) },
            CorpusSpec { visual_dependency: 1.5, ..small(Task::Ner) },
            CorpusSpec { vocab_size: 20, ..small(Task::Ner) },
            CorpusSpec { max_len: 40, ..small(Task::Ner) },
            CorpusSpec { num_relation_types: 1, ..small(Task::Re) },
        ];
        for spec in bad {
            assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn empty_corpus_round_trips_through_header_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        write_corpus(&[], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn single_sample_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        let s = generate_corpus(&small(Task::Ner)).unwrap().train.remove(0);
        write_corpus(std::slice::from_ref(&s), &p).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), vec![s]);
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let s = generate_corpus(&small(Task::Re)).unwrap().train.remove(0);
        write_corpus(&[s.clone(), s], &p).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{\"id\": 3}\n");
        std::fs::write(&p, text).unwrap();
        match read_corpus(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bio_string_checker() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(bio_string_is_valid(&v(&["B-PER", "I-PER", "O", "B-LOC"])));
        assert!(!bio_string_is_valid(&v(&["O", "I-PER"])));
        assert!(!bio_string_is_valid(&v(&["B-PER", "I-LOC"])));
        assert!(!bio_string_is_valid(&v(&["PER"])));
    }
}
