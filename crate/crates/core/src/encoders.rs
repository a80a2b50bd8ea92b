//! Toy text and image encoders producing token sequences of width `d`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Specials first, then the distinct words in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(sorted.into_iter().filter(|w| w != PAD && w != UNK));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens }
    }

    /// Vocabulary over the synthetic caption grammar.
    pub fn grammar() -> Self {
        Self::from_words(crate::synth::grammar_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `token<TAB>id` lines sorted by token.
    pub fn to_text(&self) -> String {
        self.ids.iter().map(|(t, i)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| err("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| err("bad id"))?;
            pairs.push((tok.to_string(), id));
        }
        pairs.sort_by_key(|p| p.1);
        let ok = pairs.iter().enumerate().all(|(i, p)| p.1 == i)
            && pairs.first().is_some_and(|p| p.0 == PAD)
            && pairs.get(1).is_some_and(|p| p.0 == UNK);
        if !ok {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "ids must be dense from 0 with <pad>=0 and <unk>=1".into(),
            });
        }
        let tokens: Vec<String> = pairs.into_iter().map(|p| p.0).collect();
        let ids: BTreeMap<_, _> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "duplicate token".into(),
            });
        }
        Ok(Self { ids, tokens })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect()
}

/// FNV-1a, 64-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character trigrams of `<word>`.
pub fn trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = format!("<{word}>").chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    /// Hashed trigram rows; used only for term embeddings, never trained.
    pub subword: ParamId,
    pub d: usize,
    pub max_len: usize,
    pub buckets: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d: usize,
        max_len: usize,
        buckets: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embed = store.add_normal(format!("{prefix}.embed"), &[vocab_size, d], 0.5, rng)?;
        let pos = store.add_normal(format!("{prefix}.pos"), &[max_len, d], 0.1, rng)?;
        let subword = store.add_normal(format!("{prefix}.subword"), &[buckets, d], 0.5, rng)?;
        store.get_mut(subword).trainable = false;
        Ok(Self {
            embed,
            pos,
            subword,
            d,
            max_len,
            buckets,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.embed, self.pos]
    }

    /// Token embedding plus position embedding, one row per id.
    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if ids.len() > self.max_len {
            return Err(Error::Invalid(format!(
                "prompt has {} tokens, limit is {}",
                ids.len(),
                self.max_len
            )));
        }
        let table = g.param(self.embed);
        let tok = g.embedding(table, ids)?;
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, ids.len())?;
        g.add(tok, pos)
    }

    /// Unit-norm embedding of a single term: the mean-pooled encoding of the
    /// word plus the mean of its hashed trigram rows. Out-of-vocabulary terms
    /// share the unknown-token row but differ through their trigrams.
    pub fn term_embedding(&self, store: &ParamStore, vocab: &Vocabulary, word: &str) -> Vec<f64> {
        let id = vocab.id(word).unwrap_or(UNK_ID);
        let (embed, pos, sub) = (store.value(self.embed), store.value(self.pos), store.value(self.subword));
        let mut v: Vec<f64> = embed.row(id).iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
        let grams = trigrams(word);
        let k = 1.0 / grams.len() as f64;
        for gram in &grams {
            let row = sub.row((fnv1a(gram.as_bytes()) % self.buckets as u64) as usize);
            for (x, r) in v.iter_mut().zip(row) {
                *x += k * r;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub proj: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub channels: usize,
    pub size: usize,
    gather: Arc<[usize]>,
}

/// Gather table mapping `[tokens × patch²·channels]` to pixel indices,
/// patches in row-major order, each flattened as (row, col, channel).
pub fn patch_table(width: usize, height: usize, channels: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(Error::Indivisible { width, height, patch });
    }
    let mut table = Vec::with_capacity(width * height * channels);
    for py in 0..height / patch {
        for px in 0..width / patch {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..channels {
                        table.push(((py * patch + y) * width + px * patch + x) * channels + c);
                    }
                }
            }
        }
    }
    Ok(table)
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        size: usize,
        channels: usize,
        patch: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let gather: Arc<[usize]> = patch_table(size, size, channels, patch)?.into();
        let fan_in = patch * patch * channels;
        let tokens = (size / patch) * (size / patch);
        let proj = store.add_normal(format!("{prefix}.proj"), &[fan_in, d], (fan_in as f64).powf(-0.5), rng)?;
        let pos = store.add_normal(format!("{prefix}.pos"), &[tokens, d], 0.1, rng)?;
        Ok(Self {
            proj,
            pos,
            patch,
            channels,
            size,
            gather,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.proj, self.pos]
    }

    pub fn tokens(&self) -> usize {
        (self.size / self.patch) * (self.size / self.patch)
    }

    pub fn check(&self, img: &Image) -> Result<()> {
        if !img.width.is_multiple_of(self.patch) || !img.height.is_multiple_of(self.patch) {
            return Err(Error::Indivisible {
                width: img.width,
                height: img.height,
                patch: self.patch,
            });
        }
        if img.width != self.size || img.height != self.size || img.channels != self.channels {
            return Err(Error::Invalid(format!(
                "encoder expects {0}x{0}x{1}, got {2}x{3}x{4}",
                self.size, self.channels, img.width, img.height, img.channels
            )));
        }
        Ok(())
    }

    /// Patch projection plus positional embedding, one row per patch.
    pub fn encode(&self, g: &mut Graph, img: &Image) -> Result<Var> {
        self.check(img)?;
        let pixels = g.input(Tensor::matrix(1, img.data.len(), img.data.clone())?);
        let fan_in = self.patch * self.patch * self.channels;
        let patches = g.gather(pixels, self.gather.clone(), self.tokens(), fan_in)?;
        let proj = g.param(self.proj);
        let v = g.matmul(patches, proj)?;
        let pos = g.param(self.pos);
        g.add(v, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["blue", "denim", "jacket", "top"])
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert!(tokenize("", &v).is_empty());
        let id = |w| v.id(w).unwrap();
        assert_eq!(tokenize("Blue denim jacket", &v), vec![id("blue"), id("denim"), id("jacket")]);
        assert_eq!(tokenize("chambray top", &v), vec![UNK_ID, id("top")]);
        assert_eq!(tokenize("blue, denim!", &v), vec![id("blue"), id("denim")]);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocabulary::grammar();
        let text = v.to_text();
        let back = Vocabulary::from_text(&text, Path::new("v")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(1));
        let lines: Vec<&str> = text.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn vocab_rejects_gaps() {
        assert!(Vocabulary::from_text("<pad>\t0\n<unk>\t1\nx\t3\n", Path::new("v")).is_err());
        assert!(Vocabulary::from_text("<pad>\t0\nbad line\n", Path::new("v")).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn trigram_split() {
        assert_eq!(trigrams("ab"), vec!["<ab", "ab>"]);
    }

    #[test]
    fn patch_table_orders_patches_row_major() {
        let t = patch_table(4, 4, 1, 2).unwrap();
        assert_eq!(&t[..4], &[0, 1, 4, 5]);
        assert_eq!(&t[4..8], &[2, 3, 6, 7]);
        assert!(patch_table(6, 4, 1, 4).is_err());
    }

    #[test]
    fn term_embeddings_are_unit_and_distinguish_unknowns() {
        let v = vocab();
        let mut s = ParamStore::new();
        let enc = TextEncoder::new(&mut s, "t", v.len(), 8, 4, 16, &mut Rng::new(1)).unwrap();
        let a = enc.term_embedding(&s, &v, "chambray");
        let b = enc.term_embedding(&s, &v, "velvet");
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, b);
    }

    #[test]
    fn text_encoder_rejects_empty_and_long() {
        let v = vocab();
        let mut s = ParamStore::new();
        let enc = TextEncoder::new(&mut s, "t", v.len(), 8, 2, 16, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new(&s);
        assert!(matches!(enc.encode(&mut g, &[]), Err(Error::EmptyPrompt)));
        assert!(enc.encode(&mut g, &[2, 3, 4]).is_err());
    }
}
