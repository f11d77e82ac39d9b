//! Vocabulary and tag-set files: one entry per line, in id order.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use qgen_core::corpus::{Lexicon, TagSet, Vocabulary, UNKNOWN_TAG};

fn write_list(path: &Path, items: &[String]) -> Result<()> {
    let mut text = items.join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("{}: cannot write", path.display()))
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    Ok(text.lines().map(String::from).collect())
}

pub const WORDS_FILE: &str = "vocab.txt";
pub const POS_FILE: &str = "pos.txt";
pub const NER_FILE: &str = "ner.txt";

pub fn save_lexicon(dir: &Path, lex: &Lexicon) -> Result<()> {
    write_list(&dir.join(WORDS_FILE), lex.words.to_list())?;
    write_list(&dir.join(POS_FILE), lex.pos.to_list())?;
    write_list(&dir.join(NER_FILE), lex.ner.to_list())
}

fn read_tags(path: &Path) -> Result<TagSet> {
    let list = read_list(path)?;
    if list.first().map(String::as_str) != Some(UNKNOWN_TAG) {
        anyhow::bail!("{}: first entry must be `{UNKNOWN_TAG}`", path.display());
    }
    Ok(TagSet::from_tags(list.into_iter().skip(1)))
}

pub fn load_lexicon(dir: &Path) -> Result<Lexicon> {
    let words_path = dir.join(WORDS_FILE);
    let words = Vocabulary::from_list(&read_list(&words_path)?)
        .with_context(|| format!("{}: invalid vocabulary", words_path.display()))?;
    Ok(Lexicon { words, pos: read_tags(&dir.join(POS_FILE))?, ner: read_tags(&dir.join(NER_FILE))? })
}
