use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha1::{Digest, Sha1};

use super::split::{Split, SplitSpec};
use crate::error::{Error, Result};
use crate::features::NoiseBank;

/// Keyword column value of background-noise entries.
pub const SILENCE_LABEL: &str = "_silence_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub keyword: String,
    pub split: Split,
    pub is_silence: bool,
    /// Sample offset of the one-second crop, for silence entries.
    pub crop_offset: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

/// Labeled utterance inventory.
///
/// On disk it is a UTF-8 file with one record per line:
/// `path<TAB>keyword<TAB>split<TAB>silence_flag[<TAB>crop_offset]`, where
/// `split` is `train`, `val` or `test` and `silence_flag` is `0` or `1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total entries per split, silence included.
    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        self.entries.iter().for_each(|e| c.bump(e.split));
        c
    }

    /// Keyword (non-silence) entries per split.
    pub fn keyword_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        self.entries
            .iter()
            .filter(|e| !e.is_silence)
            .for_each(|e| c.bump(e.split));
        c
    }

    /// Entry indices of every keyword class in `split`, by class name.
    pub fn classes(&self, split: Split) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.split == split && !e.is_silence {
                out.entry(e.keyword.as_str()).or_default().push(i);
            }
        }
        out
    }

    pub fn silence(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split && e.is_silence)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                e.path.display(),
                e.keyword,
                e.split,
                u8::from(e.is_silence)
            );
            if let Some(off) = e.crop_offset {
                let _ = write!(out, "\t{off}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::ManifestParse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if !(4..=5).contains(&f.len()) {
                return Err(bad("expected 4 or 5 tab-separated fields"));
            }
            let split: Split = f[2].parse().map_err(|_| bad("unknown split"))?;
            let is_silence = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("silence flag must be 0 or 1")),
            };
            let crop_offset = f
                .get(4)
                .map(|v| v.parse::<usize>().map_err(|_| bad("bad crop offset")))
                .transpose()?;
            entries.push(ManifestEntry {
                path: PathBuf::from(f[0]),
                keyword: f[1].to_string(),
                split,
                is_silence,
                crop_offset,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

const MAX_NUM_WAVS_PER_CLASS: u64 = (1 << 27) - 1;

/// Split assignment of the Speech Commands hash rule: SHA-1 of the file name
/// with its `_nohash_` suffix removed, mapped to a percentage; the first 10%
/// go to validation and the next 10% to testing.
pub fn gsc_split_of(file_name: &str) -> Split {
    let stem = match file_name.find("_nohash_") {
        Some(i) => &file_name[..i],
        None => file_name,
    };
    let digest = Sha1::digest(stem.as_bytes());
    // int(hexdigest, 16) mod 2^27 only depends on the last four bytes
    let tail = u32::from_be_bytes([digest[16], digest[17], digest[18], digest[19]]);
    let bucket = u64::from(tail) % (MAX_NUM_WAVS_PER_CLASS + 1);
    let percentage = bucket as f64 * (100.0 / MAX_NUM_WAVS_PER_CLASS as f64);
    if percentage < 10.0 {
        Split::Val
    } else if percentage < 20.0 {
        Split::Test
    } else {
        Split::Train
    }
}

fn read_list(path: &Path) -> Result<Option<HashSet<String>>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Scans a Speech Commands layout (`<root>/<keyword>/*.wav`) and keeps, for
/// each keyword of `spec`, the utterances whose official split matches the
/// split the keyword belongs to. `validation_list.txt` / `testing_list.txt`
/// decide the official split when present; otherwise the hash rule does.
pub fn build_manifest(root: &Path, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    let val_list = read_list(&root.join("validation_list.txt"))?;
    let test_list = read_list(&root.join("testing_list.txt"))?;
    let use_lists = val_list.is_some() || test_list.is_some();
    let (val_list, test_list) = (val_list.unwrap_or_default(), test_list.unwrap_or_default());

    let mut entries = Vec::new();
    for split in Split::ALL {
        for keyword in spec.keywords(split) {
            let dir = root.join(keyword);
            if !dir.is_dir() {
                return Err(Error::MissingKeyword {
                    keyword: keyword.clone(),
                    root: root.to_path_buf(),
                });
            }
            let mut files: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
                .collect();
            files.sort();
            for file in files {
                let rel = format!("{keyword}/{file}");
                let official = if use_lists {
                    if val_list.contains(&rel) {
                        Split::Val
                    } else if test_list.contains(&rel) {
                        Split::Test
                    } else {
                        Split::Train
                    }
                } else {
                    gsc_split_of(&file)
                };
                if official == split {
                    entries.push(ManifestEntry {
                        path: dir.join(&file),
                        keyword: keyword.clone(),
                        split,
                        is_silence: false,
                        crop_offset: None,
                    });
                }
            }
        }
    }
    let manifest = Manifest::new(entries);
    let counts = manifest.counts();
    if let Some(&s) = Split::ALL.iter().find(|&&s| counts.get(s) == 0) {
        return Err(Error::EmptySplit(s));
    }
    Ok(manifest)
}

/// Appends, to every split, as many silence entries as the split's average
/// number of utterances per keyword class (rounded half to even). Each
/// silence entry is a seeded one-second crop of a random noise clip.
pub fn add_silence<R: Rng + ?Sized>(
    manifest: &Manifest,
    bank: &NoiseBank,
    rng: &mut R,
) -> Result<Manifest> {
    if bank.is_empty() {
        return Err(Error::EmptyNoiseBank);
    }
    let mut entries: Vec<ManifestEntry> = manifest
        .entries()
        .iter()
        .filter(|e| !e.is_silence)
        .cloned()
        .collect();
    for split in Split::ALL {
        let in_split: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
        let classes: BTreeSet<&str> = in_split.iter().map(|e| e.keyword.as_str()).collect();
        if classes.is_empty() {
            continue;
        }
        let count = (in_split.len() as f64 / classes.len() as f64).round_ties_even() as usize;
        let mut silence = Vec::with_capacity(count);
        for _ in 0..count {
            let clip = &bank.clips()[rng.gen_range(0..bank.clips().len())];
            let offset = rng.gen_range(0..=clip.max_offset());
            silence.push(ManifestEntry {
                path: clip.path.clone(),
                keyword: SILENCE_LABEL.to_string(),
                split,
                is_silence: true,
                crop_offset: Some(offset),
            });
        }
        entries.extend(silence);
    }
    Ok(Manifest::new(entries))
}
