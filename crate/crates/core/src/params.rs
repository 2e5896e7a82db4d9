//! Named parameter storage, tape binding and checkpoint directories.
//!
//! A checkpoint directory holds one tensor dump per parameter
//! (`<name>.pthr`) and a `manifest.txt` with one `name shape group` line per
//! parameter, shape written as `AxBxC`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::dump::{read_dump, write_dump};
use crate::numerics::{Tape, Tensor, Var};

pub const MANIFEST: &str = "manifest.txt";

/// Which part of the pipeline a parameter belongs to. The frozen groups
/// never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    VitBackbone,
    TextEncoder,
    SharedPrompts,
    IpGenerator,
    Connector,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::VitBackbone,
        ParamGroup::TextEncoder,
        ParamGroup::SharedPrompts,
        ParamGroup::IpGenerator,
        ParamGroup::Connector,
        ParamGroup::Decoder,
    ];

    pub fn is_frozen(self) -> bool {
        matches!(self, ParamGroup::VitBackbone | ParamGroup::TextEncoder)
    }

    /// Prompt-side parameters train with the prompt learning rate.
    pub fn is_prompt(self) -> bool {
        matches!(self, ParamGroup::SharedPrompts | ParamGroup::IpGenerator)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::VitBackbone => "vit_backbone",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::SharedPrompts => "shared_prompts",
            ParamGroup::IpGenerator => "ip_generator",
            ParamGroup::Connector => "connector",
            ParamGroup::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_scalars(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Binds parameters to `tape` lazily: each is recorded as a leaf the
    /// first time it is used. Frozen groups are recorded as constants.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound {
            store: self,
            tape,
            trainable: true,
            vars: RefCell::new(HashMap::new()),
        }
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_frozen<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound {
            trainable: false,
            ..self.bind(tape)
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, p) in &self.params {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} {} {}\n", shape.join("x"), p.group));
            write_dump(&dir.join(format!("{name}.pthr")), &p.value)?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut store = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, group] = fields[..] else {
                return Err(parse_err(format!("expected `name shape group`, got {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| parse_err(format!("bad shape {shape:?}"))))
                .collect::<Result<_>>()?;
            let group: ParamGroup = group.parse()?;
            let value = read_dump(&dir.join(format!("{name}.pthr")))?;
            if value.shape() != shape.as_slice() {
                return Err(parse_err(format!(
                    "{name}: manifest shape {shape:?} but dump has {:?}",
                    value.shape()
                )));
            }
            store.insert(name, value, group);
        }
        Ok(store)
    }
}

/// Parameters of a [`ParamStore`] as they appear on one tape.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    tape: &'t Tape,
    trainable: bool,
    vars: RefCell<HashMap<String, Var<'t>>>,
}

impl<'s, 't> Bound<'s, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
        let v = self
            .tape
            .leaf(p.value.clone(), self.trainable && !p.group.is_frozen());
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients after `tape.backward`, for every parameter in the store.
    /// Parameters that were never used or are frozen get exact zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        let vars = self.vars.borrow();
        self.store
            .iter()
            .map(|(name, p)| {
                let g = vars
                    .get(name)
                    .and_then(|v| self.tape.grad(*v))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
