//! Seeded toy corpus: each visual concept is a bright textured motif at a
//! fixed place on a dark noisy grid. Its close-ended answer is the concept name and its
//! open-ended answer is a templated finding whose length and wording depend
//! on the concept and on the motif intensity (severity).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{AnswerType, Dataset, Record, Split};
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Which answer types the generator emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    /// Alternates close/open in blocks of `concepts` samples, so every
    /// concept appears with both answer types.
    Mixed,
    Close,
    Open,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(SynthMode::Mixed),
            "close" => Ok(SynthMode::Close),
            "open" => Ok(SynthMode::Open),
            other => Err(Error::Config(format!("unknown synth mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub concepts: usize,
    pub samples: usize,
    /// Side length of the square grid; must be a multiple of 4.
    pub grid: usize,
    /// Uniform pixel noise amplitude.
    pub noise: u8,
    pub mode: SynthMode,
    /// Extra finding sentences appended to every open-ended answer. Their
    /// wording depends on concept and severity, which makes answers long and
    /// cell-specific.
    pub findings: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            concepts: 4,
            samples: 64,
            grid: 16,
            noise: 20,
            mode: SynthMode::Mixed,
            findings: 0,
        }
    }
}

const BACKGROUND: i32 = 40;
const SEVERITY_LEVEL: [i32; 3] = [120, 180, 240];
const SEVERITY_WORD: [&str; 3] = ["mild", "moderate", "marked"];

struct Concept {
    class: &'static str,
    region: &'static str,
    extra: [&'static str; 2],
}

const CONCEPTS: [Concept; 8] = [
    Concept {
        class: "upper left",
        region: "upper left",
        extra: ["left apex shows pleural thickening", "costophrenic angles remain sharp"],
    },
    Concept {
        class: "upper right",
        region: "upper right",
        extra: ["right apex shows scarring", "heart size is normal"],
    },
    Concept {
        class: "lower left",
        region: "lower left",
        extra: ["left base demonstrates atelectasis", "small effusion cannot be excluded"],
    },
    Concept {
        class: "lower right",
        region: "lower right",
        extra: ["right base demonstrates consolidation", "mediastinum appears midline"],
    },
    Concept {
        class: "central",
        region: "central",
        extra: ["hilar vessels look prominent", "lungs are otherwise clear"],
    },
    Concept {
        class: "horizontal band",
        region: "midlung horizontal",
        extra: ["fissure seems thickened", "no pneumothorax identified"],
    },
    Concept {
        class: "vertical band",
        region: "paramedian vertical",
        extra: ["spine alignment looks preserved", "trachea remains central"],
    },
    Concept {
        class: "peripheral rim",
        region: "peripheral",
        extra: ["pleural margins appear irregular", "osseous structures are intact"],
    },
];

pub const MAX_CONCEPTS: usize = CONCEPTS.len();

const CLOSE_QUESTIONS: [&str; 2] = ["which region is abnormal?", "where is the opacity located?"];
const OPEN_QUESTIONS: [&str; 2] = ["describe the findings.", "what are the findings?"];

/// Class string of a concept.
pub fn concept_class(concept: usize) -> &'static str {
    CONCEPTS[concept].class
}

const FINDING_NOUNS: [&str; 12] = [
    "nodule", "granuloma", "calcification", "bronchus", "vasculature", "diaphragm", "clavicle", "hilum",
    "aorta", "pericardium", "interstitium", "airway",
];
const FINDING_VERBS: [&str; 12] = [
    "looks", "appears", "seems", "remains", "measures", "persists", "stays", "projects", "presents", "lies",
    "extends", "resolves",
];
const FINDING_ADJECTIVES: [&str; 12] = [
    "stable", "unchanged", "subtle", "dense", "patchy", "linear", "rounded", "faint", "tortuous", "ectatic",
    "lobulated", "smooth",
];

/// Most finding sentences an answer can carry.
pub const MAX_FINDINGS: usize = 12;

/// `count` three-word sentences fixed by concept and severity. No word
/// repeats within one answer, so neither does any bigram.
fn findings(concept: usize, severity: usize, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + (concept * 3 + severity) as u64);
    let mut pick = |bank: &[&'static str; 12]| {
        let mut v = bank.to_vec();
        v.shuffle(&mut rng);
        v
    };
    let (nouns, verbs, adjs) = (pick(&FINDING_NOUNS), pick(&FINDING_VERBS), pick(&FINDING_ADJECTIVES));
    (0..count)
        .map(|j| format!("{} {} {}.", nouns[j], verbs[j], adjs[j]))
        .collect()
}

/// Open-ended answer text for a concept at a severity in `0..3`, followed
/// by `extra_findings` finding sentences.
pub fn description(concept: usize, severity: usize, extra_findings: usize) -> String {
    let c = &CONCEPTS[concept];
    let mut sentences = vec![format!(
        "{} opacity projects over the {} zone.",
        SEVERITY_WORD[severity], c.region
    )];
    for extra in c.extra.iter().take(severity) {
        sentences.push(format!("{extra}."));
    }
    sentences.extend(findings(concept, severity, extra_findings));
    sentences.join(" ")
}

fn in_motif(concept: usize, grid: usize, r: usize, c: usize) -> bool {
    let half = grid / 2;
    let q = grid / 4;
    match concept {
        0 => r < half && c < half,
        1 => r < half && c >= half,
        2 => r >= half && c < half,
        3 => r >= half && c >= half,
        4 => (q..grid - q).contains(&r) && (q..grid - q).contains(&c),
        5 => (q + q / 2..grid - q - q / 2).contains(&r),
        6 => (q + q / 2..grid - q - q / 2).contains(&c),
        _ => r < q / 2 + 1 || c < q / 2 + 1 || r >= grid - q / 2 - 1 || c >= grid - q / 2 - 1,
    }
}

/// Texture of a concept inside each 4x4 cell: solid, horizontal stripes,
/// vertical stripes, checkerboard, diagonal, cell border, centre dot,
/// anti-diagonal. Textures keep concepts apart even after position is
/// averaged away.
fn in_texture(concept: usize, r: usize, c: usize) -> bool {
    let (r, c) = (r % 4, c % 4);
    match concept {
        0 => true,
        1 => r % 2 == 0,
        2 => c % 2 == 0,
        3 => (r + c) % 2 == 0,
        4 => r == c,
        5 => r == 0 || c == 0 || r == 3 || c == 3,
        6 => (1..3).contains(&r) && (1..3).contains(&c),
        _ => r + c == 3,
    }
}

fn render(concept: usize, severity: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let n = spec.noise as i32;
    (0..spec.grid)
        .map(|r| {
            (0..spec.grid)
                .map(|c| {
                    let base = if in_motif(concept, spec.grid, r, c) && in_texture(concept, r, c) {
                        SEVERITY_LEVEL[severity]
                    } else {
                        BACKGROUND
                    };
                    let jitter = if n > 0 { rng.random_range(-n..=n) } else { 0 };
                    (base + jitter).clamp(0, 255) as u8
                })
                .collect()
        })
        .collect()
}

/// Generated records plus the concept of every record.
#[derive(Clone, Debug)]
pub struct SynthRecords {
    pub train: Vec<Record>,
    pub eval: Vec<Record>,
    pub train_concepts: Vec<usize>,
    pub eval_concepts: Vec<usize>,
}

pub fn generate_records(spec: &SynthSpec, seed: u64) -> Result<SynthRecords> {
    if spec.concepts < 2 || spec.concepts > MAX_CONCEPTS {
        return Err(Error::contract(format!(
            "synthetic corpus needs 2..={MAX_CONCEPTS} concepts, got {}",
            spec.concepts
        )));
    }
    if spec.grid < 8 || spec.grid % 4 != 0 {
        return Err(Error::contract("synthetic grid side must be a multiple of 4, at least 8"));
    }
    if spec.findings > MAX_FINDINGS {
        return Err(Error::contract(format!("at most {MAX_FINDINGS} finding sentences per answer")));
    }
    if spec.samples < 2 {
        return Err(Error::contract("synthetic corpus needs at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.samples);
    let mut concepts = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let concept = i % spec.concepts;
        let severity = rng.random_range(0..3);
        let kind = match spec.mode {
            SynthMode::Close => AnswerType::Close,
            SynthMode::Open => AnswerType::Open,
            SynthMode::Mixed if (i / spec.concepts) % 2 == 0 => AnswerType::Close,
            SynthMode::Mixed => AnswerType::Open,
        };
        let image = render(concept, severity, spec, &mut rng);
        let pick = rng.random_range(0..2);
        let (question, answer_class, answer_text) = match kind {
            AnswerType::Close => (CLOSE_QUESTIONS[pick], Some(concept_class(concept).to_owned()), None),
            AnswerType::Open => (OPEN_QUESTIONS[pick], None, Some(description(concept, severity, spec.findings))),
        };
        records.push(Record {
            id: format!("synth-{i:04}"),
            image,
            question: question.to_owned(),
            answer_type: kind,
            answer_class,
            answer_text,
        });
        concepts.push(concept);
    }
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng);
    let n_train = spec.samples * 4 / 5;
    let (tr, ev) = order.split_at(n_train);
    let pick = |idx: &[usize]| -> (Vec<Record>, Vec<usize>) {
        idx.iter().map(|&i| (records[i].clone(), concepts[i])).unzip()
    };
    let (train, train_concepts) = pick(tr);
    let (eval, eval_concepts) = pick(ev);
    Ok(SynthRecords {
        train,
        eval,
        train_concepts,
        eval_concepts,
    })
}

/// Tokenized synthetic splits with the vocabulary built from both.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub eval: Dataset,
    pub vocab: Vocab,
    pub records: SynthRecords,
}

impl SyntheticCorpus {
    pub fn train_concepts(&self) -> &[usize] {
        &self.records.train_concepts
    }

    pub fn eval_concepts(&self) -> &[usize] {
        &self.records.eval_concepts
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus> {
    let records = generate_records(spec, seed)?;
    let vocab = Vocab::build(
        records
            .train
            .iter()
            .chain(&records.eval)
            .flat_map(Record::texts),
        1,
    )?;
    let train = Dataset::from_records(Split::Train, &records.train, &vocab)?;
    let eval = Dataset::from_records(Split::Eval, &records.eval, &vocab)?;
    Ok(SyntheticCorpus {
        train,
        eval,
        vocab,
        records,
    })
}
