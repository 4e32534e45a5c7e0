//! Items, users and the leave-one-out split.
//!
//! Items are stored sorted by `item_id`, so an item's dense index orders the
//! same way as its id. User sequences are held as dense item indices.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// One catalogue item: identity plus its text and vision payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u64,
    /// Title token ids, without EOS or padding.
    pub text_tokens: Vec<usize>,
    /// Precomputed patch features, `n_patches × patch_dim`.
    pub patches: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    /// Purchases in chronological order.
    pub item_seq: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

impl UserSequence {
    /// Everything except the validation and test items.
    pub fn train(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// Training sequence joined with the validation item.
    pub fn train_and_valid(&self) -> &[usize] {
        &self.items[..self.items.len() - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    items: Vec<ItemRecord>,
    index: HashMap<u64, usize>,
    users: Vec<UserSequence>,
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const USERS_FILE: &str = "users.jsonl";

impl Dataset {
    /// Validates and indexes raw records. Every user needs at least three
    /// purchases (train, validation, test).
    pub fn new(mut items: Vec<ItemRecord>, users: Vec<UserRecord>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("no items".into()));
        }
        items.sort_by_key(|i| i.item_id);
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.item_id, i).is_some() {
                return Err(Error::Data(format!("duplicate item_id {}", it.item_id)));
            }
        }
        let shape = (
            items[0].patches.len(),
            items[0].patches.first().map_or(0, Vec::len),
        );
        for it in &items {
            if it.patches.len() != shape.0 || it.patches.iter().any(|p| p.len() != shape.1) {
                return Err(Error::Data(format!(
                    "item {} has irregular patches",
                    it.item_id
                )));
            }
        }
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(users.len());
        for u in users {
            if seen.insert(u.user_id, ()).is_some() {
                return Err(Error::Data(format!("duplicate user_id {}", u.user_id)));
            }
            if u.item_seq.len() < 3 {
                return Err(Error::Data(format!(
                    "user {} has {} purchases; at least 3 are required",
                    u.user_id,
                    u.item_seq.len()
                )));
            }
            let seq = u
                .item_seq
                .iter()
                .map(|id| {
                    index.get(id).copied().ok_or_else(|| {
                        Error::Data(format!("user {} references unknown item {id}", u.user_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(UserSequence {
                user_id: u.user_id,
                items: seq,
            });
        }
        if out.is_empty() {
            return Err(Error::Data("no users".into()));
        }
        Ok(Self {
            items,
            index,
            users: out,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let items = read_jsonl(&dir.join(ITEMS_FILE))?;
        let users = read_jsonl(&dir.join(USERS_FILE))?;
        Self::new(items, users)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(ITEMS_FILE), &self.items)?;
        let users: Vec<UserRecord> = self
            .users
            .iter()
            .map(|u| UserRecord {
                user_id: u.user_id,
                item_seq: u.items.iter().map(|&i| self.items[i].item_id).collect(),
            })
            .collect();
        write_jsonl(&dir.join(USERS_FILE), &users)
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_index(&self, item_id: u64) -> Option<usize> {
        self.index.get(&item_id).copied()
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: u64) -> ItemRecord {
        ItemRecord {
            item_id: id,
            text_tokens: vec![1, 2],
            patches: vec![vec![0.0; 2]; 2],
        }
    }

    #[test]
    fn rejects_short_sequences() {
        let users = vec![UserRecord {
            user_id: 1,
            item_seq: vec![10, 11],
        }];
        let err = Dataset::new(vec![item(10), item(11)], users).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn split_and_index_order() {
        let users = vec![UserRecord {
            user_id: 1,
            item_seq: vec![30, 10, 20, 10],
        }];
        let ds = Dataset::new(vec![item(30), item(10), item(20)], users).unwrap();
        assert_eq!(ds.item(0).item_id, 10);
        let u = &ds.users()[0];
        assert_eq!(u.train(), &[2, 0]);
        assert_eq!(u.valid(), 1);
        assert_eq!(u.test(), 0);
        assert_eq!(u.train_and_valid(), &[2, 0, 1]);
    }

    #[test]
    fn unknown_item_is_data_error() {
        let users = vec![UserRecord {
            user_id: 1,
            item_seq: vec![10, 10, 99],
        }];
        assert!(matches!(
            Dataset::new(vec![item(10)], users),
            Err(Error::Data(_))
        ));
    }
}
