//! Fabric sample database: gazetteer extraction, alias normalization and
//! key-value retrieval with a nearest-neighbour fallback for unknown terms.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{split_words, Vocabulary};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, Rng};
use crate::synth::{render_fabric_swatch, Fabric, GARMENT_NOUNS};

#[derive(Clone, Debug, PartialEq)]
pub struct FabricEntry {
    pub canonical: String,
    pub aliases: Vec<String>,
    /// Relative to the database file.
    pub image_path: String,
    pub image: Image,
    /// Unit-norm key, recomputed from `canonical` whenever the db is loaded.
    pub key: Vec<f64>,
}

/// Alias → canonical name; canonical names map to themselves.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FabricDictionary {
    map: BTreeMap<String, String>,
}

impl FabricDictionary {
    pub fn get(&self, term: &str) -> Option<&str> {
        self.map.get(term).map(String::as_str)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.map.contains_key(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, c)| (a.as_str(), c.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FabricDb {
    /// Sorted by canonical name.
    pub entries: Vec<FabricEntry>,
    pub dictionary: FabricDictionary,
}

/// Fabric term found in a prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FabricMention {
    /// An alias or canonical name from the dictionary.
    Known(String),
    /// An unrecognized word in fabric position (directly before a garment noun).
    Unrecognized(String),
}

impl FabricMention {
    pub fn term(&self) -> &str {
        match self {
            FabricMention::Known(t) | FabricMention::Unrecognized(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RetrievalPath {
    Exact,
    /// Cosine score against every entry, in entry order.
    Fallback { scores: Vec<(String, f64)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub canonical: String,
    pub path: RetrievalPath,
}

/// Gazetteer match over `words`; first match wins.
pub fn extract_fabric_label(words: &[String], db: &FabricDb, vocab: &Vocabulary) -> Option<FabricMention> {
    let known: Vec<&String> = words.iter().filter(|w| db.dictionary.contains(w)).collect();
    if let Some(first) = known.first() {
        if known.len() > 1 {
            log::warn!("prompt names {} fabric terms; using `{first}`", known.len());
        }
        return Some(FabricMention::Known(first.to_string()));
    }
    words.windows(2).find_map(|w| {
        let fabric_slot = !vocab.contains(&w[0]) && GARMENT_NOUNS.contains(&w[1].as_str());
        fabric_slot.then(|| FabricMention::Unrecognized(w[0].clone()))
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Entry {
        canonical: String,
        #[serde(default)]
        aliases: Vec<String>,
        image: String,
    },
    Alias {
        alias: String,
        canonical: String,
    },
}

impl FabricDb {
    /// Assemble a db and compute keys with `embed`. Checks uniqueness of
    /// canonical names and that every term resolves to exactly one entry.
    pub fn new(
        mut entries: Vec<(String, Vec<String>, String, Image)>,
        extra_aliases: Vec<(String, String)>,
        embed: &dyn Fn(&str) -> Vec<f64>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut map = BTreeMap::new();
        for (canonical, aliases, _, _) in &entries {
            if canonical.is_empty() || canonical.to_lowercase() != *canonical {
                return Err(Error::Invalid(format!("canonical name `{canonical}` must be lowercase")));
            }
            match map.insert(canonical.clone(), canonical.clone()) {
                Some(prev) if prev == *canonical => {
                    return Err(Error::Invalid(format!("duplicate fabric `{canonical}`")))
                }
                Some(prev) => {
                    return Err(Error::Invalid(format!(
                        "`{canonical}` is both a fabric and an alias of `{prev}`"
                    )))
                }
                None => {}
            }
            for a in aliases {
                insert_alias(&mut map, a, canonical)?;
            }
        }
        for (a, c) in &extra_aliases {
            if !entries.iter().any(|e| &e.0 == c) {
                return Err(Error::Invalid(format!("alias `{a}` points to missing fabric `{c}`")));
            }
            insert_alias(&mut map, a, c)?;
        }
        let entries = entries
            .into_iter()
            .map(|(canonical, aliases, image_path, image)| FabricEntry {
                key: embed(&canonical),
                canonical,
                aliases,
                image_path,
                image,
            })
            .collect();
        Ok(Self {
            entries,
            dictionary: FabricDictionary { map },
        })
    }

    /// One entry per grammar fabric with a procedural swatch.
    pub fn from_grammar(size: usize, seed: u64, embed: &dyn Fn(&str) -> Vec<f64>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, f) in Fabric::ALL.iter().enumerate() {
            let mut rng = Rng::new(derive_seed(seed, i as u64));
            let img = render_fabric_swatch(f.name(), size, &mut rng)?;
            entries.push((
                f.name().to_string(),
                f.aliases().iter().map(|a| a.to_string()).collect(),
                format!("swatch_{}.ppm", f.name()),
                img,
            ));
        }
        Self::new(entries, Vec::new(), embed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, canonical: &str) -> Option<&FabricEntry> {
        self.entries.iter().find(|e| e.canonical == canonical)
    }

    /// Canonical name for a term; canonical names map to themselves.
    pub fn normalize(&self, label: &str) -> Result<&str> {
        self.dictionary
            .get(label)
            .ok_or_else(|| Error::UnknownFabric(label.to_string()))
    }

    /// Exact hit for known terms, otherwise the entry whose key has the
    /// highest cosine with `embed(label)`; ties go to the smaller name.
    pub fn retrieve(&self, label: &str, embed: &dyn Fn(&str) -> Vec<f64>) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if let Ok(canonical) = self.normalize(label) {
            let index = self.entries.iter().position(|e| e.canonical == canonical).unwrap();
            return Ok(Retrieval {
                index,
                canonical: canonical.to_string(),
                path: RetrievalPath::Exact,
            });
        }
        let q = embed(label);
        let scores: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|e| (e.canonical.clone(), cosine(&q, &e.key)))
            .collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if s.1 > scores[best].1 {
                best = i;
            }
        }
        Ok(Retrieval {
            index: best,
            canonical: scores[best].0.clone(),
            path: RetrievalPath::Fallback { scores },
        })
    }

    /// Extract, normalize and retrieve from a raw prompt. `None` means the
    /// prompt names no fabric.
    pub fn lookup(
        &self,
        prompt: &str,
        vocab: &Vocabulary,
        embed: &dyn Fn(&str) -> Vec<f64>,
    ) -> Result<Option<(FabricMention, Retrieval)>> {
        let words = split_words(prompt);
        match extract_fabric_label(&words, self, vocab) {
            None => Ok(None),
            Some(m) => {
                let r = self.retrieve(m.term(), embed)?;
                Ok(Some((m, r)))
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let r = Record::Entry {
                canonical: e.canonical.clone(),
                aliases: e.aliases.clone(),
                image: e.image_path.clone(),
            };
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Write `db.jsonl`-style records to `path` and swatches beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = parent(path);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in &self.entries {
            e.image.save(&dir.join(&e.image_path))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, embed: &dyn Fn(&str) -> Vec<f64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = parent(path);
        let mut entries = Vec::new();
        let mut aliases = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            let rec: Record = serde_json::from_str(line).map_err(|_| {
                err("expected {canonical, aliases, image} or {alias, canonical}".into())
            })?;
            match rec {
                Record::Entry {
                    canonical,
                    aliases: al,
                    image,
                } => {
                    if let Some(prev) = seen.insert(canonical.clone(), line_no) {
                        return Err(err(format!("duplicate fabric `{canonical}` (first on line {prev})")));
                    }
                    let img = Image::load(&dir.join(&image)).map_err(|e| err(e.to_string()))?;
                    if img.channels != 3 {
                        return Err(err(format!("sample image `{image}` must have 3 channels")));
                    }
                    entries.push((canonical, al, image, img));
                }
                Record::Alias { alias, canonical } => {
                    aliases.push((alias, canonical, line_no));
                }
            }
        }
        for (alias, canonical, line_no) in &aliases {
            if !seen.contains_key(canonical) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line_no,
                    msg: format!("alias `{alias}` points to missing fabric `{canonical}`"),
                });
            }
        }
        let extra = aliases.into_iter().map(|(a, c, _)| (a, c)).collect();
        Self::new(entries, extra, embed)
    }
}

fn insert_alias(map: &mut BTreeMap<String, String>, alias: &str, canonical: &str) -> Result<()> {
    if alias.is_empty() || alias.to_lowercase() != alias {
        return Err(Error::Invalid(format!("alias `{alias}` must be lowercase")));
    }
    match map.insert(alias.to_string(), canonical.to_string()) {
        Some(prev) if prev != canonical => Err(Error::Invalid(format!(
            "alias `{alias}` maps to both `{prev}` and `{canonical}`"
        ))),
        _ => Ok(()),
    }
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
