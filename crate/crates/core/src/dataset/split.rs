use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Keyword lists of the three class-disjoint splits. Names are the GSC
/// directory names (lower case).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| (*s).to_string()).collect()
}

impl SplitSpec {
    /// The fixed 15 / 10 / 10 keyword partition of Speech Commands v2.
    pub fn split_gsc() -> Self {
        Self {
            train: owned(&[
                "happy", "house", "bird", "bed", "backward", "sheila", "marvin", "wow", "tree",
                "follow", "dog", "visual", "forward", "learn", "cat",
            ]),
            val: owned(&[
                "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
            ]),
            test: owned(&[
                "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
            ]),
        }
    }

    pub fn keywords(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, keyword: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.keywords(s).iter().any(|k| k == keyword))
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut all: Vec<&String> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(Error::Config(
                "split keyword lists must be pairwise disjoint".into(),
            ));
        }
        Ok(())
    }
}
