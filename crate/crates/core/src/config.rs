//! Flat `key = value` files. Blank lines and `#` comments are skipped; every
//! key must be consumed by the reader or the file is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(path, i + 1, "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Removes and parses `key`, leaving `slot` untouched when it is absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::parse(&self.path, line, format!("bad value for `{key}`: {e}")))?;
        }
        Ok(())
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.entries.remove(key) {
            *slot = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::parse(&self.path, line, format!("bad item `{s}` in `{key}`: {e}")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::parse(self.path, line, format!("unknown key `{key}`"))),
        }
    }
}

impl DatasetSpec {
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut s = DatasetSpec::default();
        kv.take("classes", &mut s.classes)?;
        kv.take("size", &mut s.size)?;
        kv.take("train", &mut s.train)?;
        kv.take("test", &mut s.test)?;
        kv.take("seed", &mut s.seed)?;
        kv.take("min_instances", &mut s.min_instances)?;
        kv.take("max_instances", &mut s.max_instances)?;
        kv.take("extra_single", &mut s.extra_single)?;
        kv.take("extra_domain", &mut s.extra_domain)?;
        kv.take("radius_min", &mut s.radius_min)?;
        kv.take("radius_max", &mut s.radius_max)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "classes = {}\nsize = {}\ntrain = {}\ntest = {}\nseed = {}\nmin_instances = {}\nmax_instances = {}\nextra_single = {}\nextra_domain = {}\nradius_min = {}\nradius_max = {}\n",
            self.classes,
            self.size,
            self.train,
            self.test,
            self.seed,
            self.min_instances,
            self.max_instances,
            self.extra_single,
            self.extra_domain,
            self.radius_min,
            self.radius_max
        )
    }
}
