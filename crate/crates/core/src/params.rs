//! Named, group-tagged parameter storage shared by the encoder and all heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

/// Parameter group tag. Freeze and learning-rate policies act per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Frontend,
    /// 1-based encoder block index.
    Block(usize),
    HeadAsr,
    HeadAt,
    HeadSv,
    Transducer,
    SvClassifier,
}

impl Group {
    pub fn is_encoder(self) -> bool {
        matches!(self, Group::Frontend | Group::Block(_))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Frontend => f.write_str("frontend"),
            Group::Block(i) => write!(f, "block_{i}"),
            Group::HeadAsr => f.write_str("head_asr"),
            Group::HeadAt => f.write_str("head_at"),
            Group::HeadSv => f.write_str("head_sv"),
            Group::Transducer => f.write_str("transducer"),
            Group::SvClassifier => f.write_str("sv_classifier"),
        }
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "frontend" => Group::Frontend,
            "head_asr" => Group::HeadAsr,
            "head_at" => Group::HeadAt,
            "head_sv" => Group::HeadSv,
            "transducer" => Group::Transducer,
            "sv_classifier" => Group::SvClassifier,
            other => {
                let idx = other
                    .strip_prefix("block_")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| format!("unknown parameter group '{other}'"))?;
                Group::Block(idx)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: Group,
    pub name: String,
    pub value: Tensor,
}

impl Param {
    /// `group/name`, unique within a store.
    pub fn key(&self) -> String {
        format!("{}/{}", self.group, self.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: Group, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.find(group, name).is_none(),
            "duplicate parameter {group}/{name}"
        );
        self.params.push(Param {
            group,
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, group: Group, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(group, name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, group: Group, name: &str, shape: &[usize]) -> ParamId {
        self.add(group, name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, group: Group, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(group, name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, group: Group, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.group == group && p.name == name)
            .map(ParamId)
    }

    /// Looks up a parameter and checks its shape.
    pub fn expect(&self, group: Group, name: &str, shape: &[usize]) -> Result<ParamId, String> {
        let id = self
            .find(group, name)
            .ok_or_else(|| format!("missing parameter {group}/{name}"))?;
        let actual = self.get(id).value.shape();
        if actual != shape {
            return Err(format!(
                "parameter {group}/{name} has shape {actual:?}, config expects {shape:?}"
            ));
        }
        Ok(id)
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on `tape`. Parameters whose group satisfies
    /// `trainable` become gradient-tracking leaves; the rest are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Binding { vars }
    }
}

/// Parameter-to-tape mapping produced by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over existing tape variables, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_round_trip() {
        for g in [
            Group::Frontend,
            Group::Block(1),
            Group::Block(12),
            Group::HeadAsr,
            Group::HeadAt,
            Group::HeadSv,
            Group::Transducer,
            Group::SvClassifier,
        ] {
            assert_eq!(g.to_string().parse::<Group>().unwrap(), g);
        }
        assert!("block_0".parse::<Group>().is_err());
        assert!("decoder".parse::<Group>().is_err());
    }
}
