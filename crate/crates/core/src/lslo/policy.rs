use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SiteKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceType {
    High,
    Medium,
    Low,
    VeryLow,
}

impl ResourceType {
    pub const ALL: [ResourceType; 4] =
        [ResourceType::High, ResourceType::Medium, ResourceType::Low, ResourceType::VeryLow];

    pub fn letter(self) -> char {
        match self {
            ResourceType::High => 'H',
            ResourceType::Medium => 'M',
            ResourceType::Low => 'L',
            ResourceType::VeryLow => 'V',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.letter() == c.to_ascii_uppercase())
    }
}

fn default_rank() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub code: String,
    pub resource_type: ResourceType,
    /// Sentence-pair budget; stands in for the size of the language's bitext.
    pub corpus_size: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
}

impl LanguageSpec {
    pub fn new(code: &str, resource_type: ResourceType, corpus_size: usize) -> Self {
        Self { code: code.to_string(), resource_type, corpus_size, rank: default_rank() }
    }
}

pub(crate) fn check_languages(langs: &[LanguageSpec]) -> Result<()> {
    for (i, l) in langs.iter().enumerate() {
        if l.rank == 0 {
            return Err(Error::Config(format!("language {} has rank 0", l.code)));
        }
        if langs[..i].iter().any(|o| o.code == l.code) {
            return Err(Error::Config(format!("duplicate language code {}", l.code)));
        }
    }
    Ok(())
}

/// Rank per resource type, written `rH;rM;rV` or `rH;rM;rL;rV`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankPolicy {
    ranks: BTreeMap<ResourceType, usize>,
    label: String,
}

impl RankPolicy {
    /// The same rank for every resource type; labelled `r;r;r`.
    pub fn uniform(rank: usize) -> Self {
        Self {
            ranks: ResourceType::ALL.into_iter().map(|r| (r, rank)).collect(),
            label: format!("{rank};{rank};{rank}"),
        }
    }

    pub fn rank_for(&self, resource: ResourceType) -> Option<usize> {
        self.ranks.get(&resource).copied()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Resolves every language's rank, failing on an unmapped resource type.
    pub fn assign(&self, langs: &[LanguageSpec]) -> Result<Vec<LanguageSpec>> {
        langs
            .iter()
            .map(|l| {
                let rank = self.rank_for(l.resource_type).ok_or_else(|| {
                    Error::Config(format!(
                        "rank policy \"{}\" has no rank for {:?} language {}",
                        self.label, l.resource_type, l.code
                    ))
                })?;
                Ok(LanguageSpec { rank, ..l.clone() })
            })
            .collect()
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(';').map(str::trim).collect();
        let types: &[ResourceType] = match parts.len() {
            3 => &[ResourceType::High, ResourceType::Medium, ResourceType::VeryLow],
            4 => &ResourceType::ALL,
            n => return Err(Error::Config(format!("rank policy \"{s}\" has {n} fields, expected 3 or 4"))),
        };
        let mut ranks = BTreeMap::new();
        for (p, &t) in parts.iter().zip(types) {
            let r: usize =
                p.parse().map_err(|_| Error::Config(format!("rank policy \"{s}\": \"{p}\" is not a rank")))?;
            if r == 0 {
                return Err(Error::Config(format!("rank policy \"{s}\": ranks must be positive")));
            }
            ranks.insert(t, r);
        }
        Ok(Self { ranks, label: parts.join(";") })
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl Serialize for RankPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for RankPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which site kinds receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    All,
    OnlyFc,
    OnlyAttn,
}

impl Placement {
    pub fn admits(self, kind: SiteKind) -> bool {
        match self {
            Placement::All => true,
            Placement::OnlyFc => kind.is_ffn(),
            Placement::OnlyAttn => !kind.is_ffn(),
        }
    }
}
