//! Seeded synthetic corpus with matching word vectors.
//!
//! Every table draws its words from its own theme, a cluster of pseudo-words
//! whose vectors sit around a shared centroid. Questions mix a few table
//! words, some same-theme words that never occur in the table, filler words,
//! and occasionally a number. Held-out tables use themes never seen in
//! training, so retrieval on them has to go through the vector geometry.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ColumnType, Corpus, Question, Split, SplitData, Table};
use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

const SYLLABLES: [&str; 20] = [
    "ba", "ke", "di", "lo", "mu", "na", "pe", "ri", "so", "tu", "va", "ze", "gi", "ho", "ju", "fa", "we", "yo", "ci",
    "xu",
];

const FILLER: [&str; 16] = [
    "what", "which", "is", "the", "of", "for", "show", "find", "with", "in", "was", "who", "how", "many", "name",
    "list",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tables: usize,
    /// Tables whose questions form the training split.
    pub train_tables: usize,
    pub questions_per_table: usize,
    /// Of each held-out table's questions, this many go to dev and the
    /// rest to test.
    pub dev_questions_per_table: usize,
    pub word_dim: usize,
    /// Words that may appear in a table.
    pub table_words_per_theme: usize,
    /// Same-theme words that only appear in questions.
    pub paraphrase_words_per_theme: usize,
    /// Half-width of the uniform noise around a theme centroid.
    pub theme_noise: f32,
    /// Probability that a sampled table word is swapped for a paraphrase.
    pub paraphrase_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tables: 60,
            train_tables: 40,
            questions_per_table: 15,
            dev_questions_per_table: 5,
            word_dim: 32,
            table_words_per_theme: 16,
            paraphrase_words_per_theme: 8,
            theme_noise: 0.35,
            paraphrase_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub embeddings: Vec<(String, Vec<f32>)>,
}

impl SynthCorpus {
    pub fn store(&self) -> Result<EmbeddingStore> {
        EmbeddingStore::from_vectors(self.embeddings[0].1.len(), self.embeddings.iter().cloned())
    }
}

/// Model and optimizer settings sized for the default synthetic corpus.
pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        word_dim: SynthConfig::default().word_dim,
        column_intermediate_dim: 64,
        mlp_hidden_dims: vec![64, 32],
        learning_rate: 1e-3,
        batch_size: 32,
        max_epochs: 20,
        seed,
        ..Default::default()
    }
}

/// Unique lowercase pseudo-word for `n`, at least three syllables.
fn pseudo_word(mut n: usize) -> String {
    let mut word = String::new();
    for _ in 0..3 {
        word.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    while n > 0 {
        word.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    word
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize, limit: f32) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-limit..=limit)).collect()
}

struct Theme {
    table_words: Vec<String>,
    paraphrases: Vec<String>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String], n: usize) -> Vec<&'a str> {
    (0..n)
        .map(|_| words.choose(rng).expect("nonempty theme").as_str())
        .collect()
}

fn make_table(rng: &mut ChaCha8Rng, id: String, theme: &Theme) -> Table {
    let n_cols = rng.gen_range(3..=5);
    let n_rows = rng.gen_range(4..=8);
    let real_col = rng.gen_bool(0.5).then(|| rng.gen_range(0..n_cols));
    let mut column_names = Vec::with_capacity(n_cols);
    let mut column_types = Vec::with_capacity(n_cols);
    for c in 0..n_cols {
        let k = rng.gen_range(1..=2);
        column_names.push(pick(rng, &theme.table_words, k).join(" "));
        column_types.push(if Some(c) == real_col {
            ColumnType::Real
        } else {
            ColumnType::Text
        });
    }
    let rows = (0..n_rows)
        .map(|_| {
            column_types
                .iter()
                .map(|ty| match ty {
                    ColumnType::Real => rng.gen_range(1..5000).to_string(),
                    ColumnType::Text => {
                        let k = rng.gen_range(1..=2);
                        pick(rng, &theme.table_words, k).join(" ")
                    }
                })
                .collect()
        })
        .collect();
    Table {
        id,
        column_names,
        column_types,
        rows,
    }
}

fn make_question(rng: &mut ChaCha8Rng, table: &Table, theme: &Theme, paraphrase_rate: f64) -> String {
    let mut vocab: Vec<String> = Vec::new();
    for name in &table.column_names {
        vocab.extend(tokenize(name));
    }
    for row in &table.rows {
        for (cell, ty) in row.iter().zip(&table.column_types) {
            if *ty == ColumnType::Text {
                vocab.extend(tokenize(cell));
            }
        }
    }
    let mut words: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        let w = if rng.gen_bool(paraphrase_rate) {
            theme.paraphrases.choose(rng).expect("nonempty theme").clone()
        } else {
            vocab.choose(rng).expect("table has words").clone()
        };
        words.push(w);
    }
    for _ in 0..rng.gen_range(1..=3) {
        words.push(FILLER.choose(rng).expect("filler").to_string());
    }
    if rng.gen_bool(0.3) {
        words.push(rng.gen_range(1..5000).to_string());
    }
    words.shuffle(rng);
    words.push("?".into());
    words.join(" ")
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.train_tables >= config.n_tables
        || config.dev_questions_per_table >= config.questions_per_table
        || config.table_words_per_theme == 0
        || config.paraphrase_words_per_theme == 0
        || config.word_dim == 0
    {
        return Err(Error::Config(
            "synth needs held-out tables, test questions, nonempty themes and word_dim > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut embeddings = Vec::new();
    let mut counter = 0usize;
    let mut themes = Vec::with_capacity(config.n_tables);
    for _ in 0..config.n_tables {
        let centroid = random_vector(&mut rng, config.word_dim, 1.0);
        let mut word = |rng: &mut ChaCha8Rng| {
            let w = pseudo_word(counter);
            counter += 1;
            let noise = random_vector(rng, config.word_dim, config.theme_noise);
            embeddings.push((w.clone(), centroid.iter().zip(&noise).map(|(c, n)| c + n).collect()));
            w
        };
        let table_words = (0..config.table_words_per_theme).map(|_| word(&mut rng)).collect();
        let paraphrases = (0..config.paraphrase_words_per_theme).map(|_| word(&mut rng)).collect();
        themes.push(Theme {
            table_words,
            paraphrases,
        });
    }
    for f in FILLER {
        embeddings.push((f.to_string(), random_vector(&mut rng, config.word_dim, 1.0)));
    }
    debug_assert_eq!(
        embeddings.iter().map(|(w, _)| w).collect::<HashSet<_>>().len(),
        embeddings.len()
    );

    let tables: Vec<Table> = themes
        .iter()
        .enumerate()
        .map(|(i, theme)| make_table(&mut rng, format!("synth-{i:03}"), theme))
        .collect();

    let mut splits: [(Vec<Table>, Vec<Question>); 3] = Default::default();
    for (i, (table, theme)) in tables.iter().zip(&themes).enumerate() {
        for j in 0..config.questions_per_table {
            let text = make_question(&mut rng, table, theme, config.paraphrase_rate);
            let split = if i < config.train_tables {
                Split::Train
            } else if j < config.dev_questions_per_table {
                Split::Dev
            } else {
                Split::Test
            };
            let slot = &mut splits[split as usize];
            slot.1.push(Question {
                id: format!("{split}-q{:05}", slot.1.len()),
                tokens: tokenize(&text),
                raw_text: text,
                table_id: table.id.clone(),
                split,
            });
        }
        if i < config.train_tables {
            splits[Split::Train as usize].0.push(table.clone());
        } else {
            splits[Split::Dev as usize].0.push(table.clone());
            splits[Split::Test as usize].0.push(table.clone());
        }
    }
    let [train, dev, test] = splits;
    let corpus = Corpus {
        train: SplitData::new(train.0, train.1)?,
        dev: SplitData::new(dev.0, dev.1)?,
        test: SplitData::new(test.0, test.1)?,
    };
    Ok(SynthCorpus { corpus, embeddings })
}
