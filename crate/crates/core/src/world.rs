//! Seeded toy world: images are feature vectors with planted object
//! dimensions, and a ground-truth process writes captions and
//! question-answer pairs about them. Some answers describe the image, some
//! are generic filler, and some name objects that are not there, so a model
//! trained on the corpus mixes image-grounded text with language prior.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contrastive::ProjectionParams;
use crate::data::{ImageRef, InstructionClass};
use crate::error::{Error, Result};
use crate::model::generate::{answer_prefix, caption_prefix, question_prefix};
use crate::model::train::{train_step, Objective, SequenceExample, TrainBatch, TrainOptions};
use crate::model::{Checkpoint, ModelDims, ToyModelParams, Vocab};

const OBJECTS: [&str; 16] = [
    "dog", "cat", "horse", "bird", "car", "bus", "bike", "boat", "tree", "flower", "table", "chair", "cup", "pizza",
    "ball", "kite",
];

const WORDS: [&str; 34] = [
    "a", "photo", "of", "and", "there", "is", "i", "see", "next", "to", "the", "near", "it", "nice", "day", "this",
    "looks", "like", "typical", "scene", "nothing", "special", "here", "what", "in", "picture", "?", "can", "you",
    "describe", "image", "detail", "why", "happening",
];

const OBJECTS_PER_IMAGE: usize = 2;
const FEATURE_NOISE: f64 = 0.1;

/// Mixture weights of the ground-truth answer process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnswerMix {
    pub relevant: f64,
    pub generic: f64,
    pub hallucinated: f64,
}

impl Default for AnswerMix {
    fn default() -> Self {
        AnswerMix {
            relevant: 0.4,
            generic: 0.4,
            hallucinated: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Ground-truth QA pairs written per image and instruction class.
    pub pairs_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub answer_mix: AnswerMix,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            pairs_per_class: 2,
            epochs: 40,
            batch_size: 32,
            learning_rate: 1.0,
            answer_mix: AnswerMix::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.answer_mix;
        if self.batch_size == 0 || self.pairs_per_class == 0 {
            return Err(Error::Config("pretraining batch size and pairs per class must be >= 1".into()));
        }
        if [m.relevant, m.generic, m.hallucinated].iter().any(|w| !(*w >= 0.0)) || m.relevant + m.generic + m.hallucinated <= 0.0 {
            return Err(Error::Config("answer mixture weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerKind {
    Relevant,
    Generic,
    Hallucinated,
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub vocab: Vocab,
    pub images: Vec<ImageRef>,
    /// Object indices planted in each image.
    pub contents: Vec<Vec<usize>>,
    num_objects: usize,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

impl ToyWorld {
    pub fn generate(num_images: usize, dims: &ModelDims, seed: u64) -> Result<Self> {
        let num_objects = OBJECTS.len().min(dims.d_img);
        if num_objects < OBJECTS_PER_IMAGE + 1 {
            return Err(Error::Config(format!("d_img must be >= {}", OBJECTS_PER_IMAGE + 1)));
        }
        let vocab = Self::vocabulary(num_objects, dims.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid normal");
        let mut images = Vec::with_capacity(num_images);
        let mut contents = Vec::with_capacity(num_images);
        let all: Vec<usize> = (0..num_objects).collect();
        for i in 0..num_images {
            let mut present: Vec<usize> = all.choose_multiple(&mut rng, OBJECTS_PER_IMAGE).copied().collect();
            present.sort_unstable();
            let mut f: Vec<f64> = (0..dims.d_img).map(|_| noise.sample(&mut rng)).collect();
            for &o in &present {
                f[o] += 1.0;
            }
            images.push(ImageRef::new(image_id(i), f));
            contents.push(present);
        }
        Ok(ToyWorld {
            vocab,
            images,
            contents,
            num_objects,
        })
    }

    /// Specials, object words, template words, then `w<i>` filler up to
    /// `vocab_size`.
    fn vocabulary(num_objects: usize, vocab_size: usize) -> Result<Vocab> {
        let mut ws: Vec<String> = OBJECTS[..num_objects].iter().chain(WORDS.iter()).map(|s| s.to_string()).collect();
        let needed = ws.len() + crate::model::vocab::SPECIALS.len();
        if vocab_size < needed {
            return Err(Error::Config(format!(
                "toy world needs a vocabulary of at least {needed} tokens, got {vocab_size}"
            )));
        }
        ws.extend((0..vocab_size - needed).map(|i| format!("w{i}")));
        Vocab::with_words(&ws)
    }

    pub fn object_word(&self, o: usize) -> &'static str {
        OBJECTS[o]
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn caption(&self, image: usize) -> Vec<String> {
        let c = &self.contents[image];
        words(&["a", "photo", "of", "a", OBJECTS[c[0]], "and", "a", OBJECTS[c[1]]])
    }

    /// The fixed instruction used to prompt an anchor for `class`.
    pub fn instruction(class: InstructionClass) -> Vec<String> {
        match class {
            InstructionClass::Conversation => words(&["what", "can", "you", "see", "?"]),
            InstructionClass::DetailedDescription => words(&["describe", "the", "image", "in", "detail"]),
            InstructionClass::ComplexReasoning => words(&["what", "is", "happening", "here", "?"]),
        }
    }

    pub fn question(&self, image: usize, class: InstructionClass, rng: &mut impl Rng) -> Vec<String> {
        let c = &self.contents[image];
        match (class, rng.random_bool(0.5)) {
            (InstructionClass::Conversation, true) => words(&["what", "is", "in", "the", "picture", "?"]),
            (InstructionClass::ComplexReasoning, true) => {
                words(&["why", "is", "the", OBJECTS[c[rng.random_range(0..c.len())]], "here", "?"])
            }
            (class, _) => Self::instruction(class),
        }
    }

    fn objects_sentence(pair: [usize; 2], rng: &mut impl Rng) -> Vec<String> {
        let (a, b) = (OBJECTS[pair[0]], OBJECTS[pair[1]]);
        match rng.random_range(0..3) {
            0 => words(&["there", "is", "a", a, "and", "a", b]),
            1 => words(&["i", "see", "a", a, "next", "to", "the", b]),
            _ => words(&["the", a, "is", "near", "the", b]),
        }
    }

    pub fn answer(&self, image: usize, kind: AnswerKind, rng: &mut impl Rng) -> Vec<String> {
        match kind {
            AnswerKind::Relevant => {
                let mut c = [self.contents[image][0], self.contents[image][1]];
                c.shuffle(rng);
                Self::objects_sentence(c, rng)
            }
            AnswerKind::Hallucinated => {
                let absent: Vec<usize> = (0..self.num_objects).filter(|o| !self.contents[image].contains(o)).collect();
                let picked: Vec<usize> = absent.choose_multiple(rng, 2).copied().collect();
                Self::objects_sentence([picked[0], picked[1]], rng)
            }
            AnswerKind::Generic => match rng.random_range(0..3) {
                0 => words(&["it", "is", "a", "nice", "day"]),
                1 => words(&["this", "looks", "like", "a", "typical", "scene"]),
                _ => words(&["there", "is", "nothing", "special", "here"]),
            },
        }
    }

    fn draw_kind(mix: &AnswerMix, rng: &mut impl Rng) -> AnswerKind {
        let total = mix.relevant + mix.generic + mix.hallucinated;
        let u = rng.random::<f64>() * total;
        if u < mix.relevant {
            AnswerKind::Relevant
        } else if u < mix.relevant + mix.generic {
            AnswerKind::Generic
        } else {
            AnswerKind::Hallucinated
        }
    }

    /// Ground-truth corpus as teacher-forced sequences. Every sequence is
    /// emitted twice: once with its image and once with the null image, so
    /// the null feature learns the image-free marginal.
    pub fn corpus(&self, cfg: &PretrainConfig, seed: u64) -> Result<Vec<SequenceExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0a9);
        let v = &self.vocab;
        let eos = v.eos();
        let with_eos = |ids: Vec<usize>| ids.into_iter().chain([eos]).collect::<Vec<_>>();
        let mut out = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            let caption = v.ids(&self.caption(i))?;
            let mut seqs = vec![(caption_prefix(v), with_eos(caption.clone()))];
            for class in InstructionClass::ALL {
                for _ in 0..cfg.pairs_per_class {
                    let q = v.ids(&self.question(i, class, &mut rng))?;
                    let kind = Self::draw_kind(&cfg.answer_mix, &mut rng);
                    let a = v.ids(&self.answer(i, kind, &mut rng))?;
                    seqs.push((question_prefix(&caption, class, v), with_eos(q.clone())));
                    seqs.push((answer_prefix(&q, class, v), with_eos(a)));
                }
            }
            for (prefix, target) in seqs {
                out.push(SequenceExample {
                    prefix: prefix.clone(),
                    target: target.clone(),
                    features: img.features.clone(),
                });
                out.push(SequenceExample {
                    prefix,
                    target,
                    features: None,
                });
            }
        }
        Ok(out)
    }
}

/// Warm-starts the generator on the ground-truth corpus with shuffled
/// minibatch gradient descent. The returned model carries
/// `train_learning_rate` for later phases.
pub fn pretrain(
    world: &ToyWorld,
    dims: &ModelDims,
    cfg: &PretrainConfig,
    train_learning_rate: f64,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let dims = ModelDims {
        vocab_size: world.vocab.len(),
        ..*dims
    };
    let mut model = ToyModelParams::init(&dims, cfg.learning_rate, seed)?;
    let mut projection = ProjectionParams::init(dims.d, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    let corpus = world.corpus(cfg, seed)?;
    let options = TrainOptions {
        objective: Objective::CrmOnly,
        contrastive: Default::default(),
        train_projection: false,
        anchor_max_tokens: 1,
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd_ba11);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = TrainBatch {
                sequences: chunk.iter().map(|&i| corpus[i].clone()).collect(),
                groups: Vec::new(),
            };
            train_step(&batch, &options, &mut model, &mut projection, &world.vocab)?;
        }
    }
    model.learning_rate = train_learning_rate;
    model.step = 0;
    Ok(Checkpoint {
        vocab: world.vocab.clone(),
        model,
        projection,
    })
}
