use super::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vocab::USER_EMB;

#[derive(Debug, Clone, PartialEq)]
pub enum SeqItem {
    /// A continuous vector entering at embedding level.
    Injected(Vec<f64>),
    Token(u32),
}

/// Ordered mix of injected vectors and token ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedSequence {
    items: Vec<SeqItem>,
}

impl MixedSequence {
    pub fn new(items: Vec<SeqItem>) -> Self {
        Self { items }
    }

    pub fn items(&self) -> &[SeqItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push_token(&mut self, id: u32) {
        self.items.push(SeqItem::Token(id));
    }

    pub fn push_vector(&mut self, v: Vec<f64>) {
        self.items.push(SeqItem::Injected(v));
    }

    /// Position of the single `<USER_EMB>` sentinel, which must be last.
    pub fn sentinel_position(&self) -> Result<usize> {
        let found: Vec<usize> = self
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| matches!(it, SeqItem::Token(USER_EMB)))
            .map(|(i, _)| i)
            .collect();
        match found.as_slice() {
            [p] if *p + 1 == self.items.len() => Ok(*p),
            [] => Err(Error::Contract("sequence has no <USER_EMB> sentinel".into())),
            [_] => Err(Error::Contract("<USER_EMB> must be the final item".into())),
            _ => Err(Error::Contract("sequence has more than one <USER_EMB>".into())),
        }
    }

    /// Input rows on `g`: injected vectors as constants, tokens through the
    /// embedding table.
    pub fn input_rows(&self, g: &mut Graph, bb: &Backbone, store: &ParamStore) -> Result<Var> {
        let d = bb.config().d_model;
        let mut injected = Vec::new();
        let mut ids = Vec::new();
        let mut order = Vec::with_capacity(self.items.len());
        let n_inj = self
            .items
            .iter()
            .filter(|i| matches!(i, SeqItem::Injected(_)))
            .count();
        for it in &self.items {
            match it {
                SeqItem::Injected(v) => {
                    if v.len() != d {
                        return Err(Error::Dimension(format!(
                            "injected vector of {} for d_model {d}",
                            v.len()
                        )));
                    }
                    order.push(injected.len() / d);
                    injected.extend_from_slice(v);
                }
                SeqItem::Token(id) => {
                    order.push(n_inj + ids.len());
                    ids.push(*id);
                }
            }
        }
        let mut pool = RowPool::new();
        if n_inj > 0 {
            let t = g.constant(Tensor::new(vec![n_inj, d], injected)?);
            pool.add(g, t);
        }
        if !ids.is_empty() {
            let t = bb.embed_tokens(g, store, &ids)?;
            pool.add(g, t);
        }
        pool.assemble(g, &order)
    }
}

/// Collects row blocks from several graph nodes and assembles them in an
/// arbitrary order with a single gather.
#[derive(Debug, Default)]
pub struct RowPool {
    parts: Vec<Var>,
    rows: usize,
}

impl RowPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a block and returns the pool index of its first row.
    pub fn add(&mut self, g: &Graph, block: Var) -> usize {
        let base = self.rows;
        self.rows += g.value(block).rows();
        self.parts.push(block);
        base
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn assemble(&self, g: &mut Graph, order: &[usize]) -> Result<Var> {
        let all = match self.parts.as_slice() {
            [] => return Err(Error::Contract("empty row pool".into())),
            [one] => *one,
            many => g.concat_rows(many)?,
        };
        g.gather_rows(all, order)
    }
}
