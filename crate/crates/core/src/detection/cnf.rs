//! Conjunctive-normal-form conditions over aggregated hop metadata, plus the
//! 12-byte-per-literal register layout they are stored in.
//!
//! Register layout, one record per literal, clauses in order:
//! ```text
//! +----------+------------+-----------+-----+--------------+--------------+
//! | metadata | comparator | aggregate | pad | constant u32 | clause u32   |
//! +----------+------------+-----------+-----+--------------+--------------+
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::int_wire::{HopMetadata, MetadataKind};

pub const MAX_CLAUSES: usize = 4;
pub const MAX_LITERALS: usize = 4;
pub const LITERAL_RECORD_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CnfError {
    #[error("{0} clauses exceed the limit of {MAX_CLAUSES}")]
    TooManyClauses(usize),
    #[error("clause {clause} has {literals} literals, limit is {MAX_LITERALS}")]
    TooManyLiterals { clause: usize, literals: usize },
    #[error("clause {0} is empty")]
    EmptyClause(usize),
    #[error("register length {0} is not a multiple of {LITERAL_RECORD_LEN}")]
    RaggedRegister(usize),
    #[error("literal {index}: bad {field} code {code}")]
    BadCode {
        index: usize,
        field: &'static str,
        code: u32,
    },
    #[error("literal {index}: clause index {clause} out of sequence")]
    ClauseOrder { index: usize, clause: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
}

impl Comparator {
    pub const ALL: [Comparator; 6] = [
        Comparator::Lt,
        Comparator::Gt,
        Comparator::Le,
        Comparator::Ge,
        Comparator::Eq,
        Comparator::Ne,
    ];

    pub fn apply(self, lhs: u32, rhs: u32) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ne => lhs != rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Gt => ">",
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }
}

/// How a literal folds the per-hop values of one packet into a single number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Aggregate {
    /// Wrapping 32-bit sum over hops.
    #[default]
    Sum,
    Max,
}

impl Aggregate {
    /// `None` when no hop carries `kind`.
    pub fn fold(self, kind: MetadataKind, hops: &[HopMetadata]) -> Option<u32> {
        let mut values = hops.iter().filter_map(|h| h.get(kind));
        let first = values.next()?;
        Some(match self {
            Aggregate::Sum => values.fold(first, u32::wrapping_add),
            Aggregate::Max => values.fold(first, u32::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub metadata: MetadataKind,
    pub cmp: Comparator,
    pub constant: u32,
    pub aggregate: Aggregate,
}

impl Literal {
    pub fn new(metadata: MetadataKind, cmp: Comparator, constant: u32) -> Self {
        Self {
            metadata,
            cmp,
            constant,
            aggregate: Aggregate::Sum,
        }
    }

    /// False when the packet does not carry the item at all.
    pub fn eval(&self, hops: &[HopMetadata]) -> bool {
        self.aggregate
            .fold(self.metadata, hops)
            .is_some_and(|v| self.cmp.apply(v, self.constant))
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.aggregate {
            Aggregate::Sum => write!(f, "{}", self.metadata)?,
            Aggregate::Max => write!(f, "max({})", self.metadata)?,
        }
        write!(f, " {} {}", self.cmp.symbol(), self.constant)
    }
}

/// AND of clauses, each an OR of literals. The empty expression is true.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CnfExpression {
    clauses: Vec<Vec<Literal>>,
}

impl CnfExpression {
    pub fn new(clauses: Vec<Vec<Literal>>) -> Result<Self, CnfError> {
        if clauses.len() > MAX_CLAUSES {
            return Err(CnfError::TooManyClauses(clauses.len()));
        }
        for (clause, lits) in clauses.iter().enumerate() {
            if lits.is_empty() {
                return Err(CnfError::EmptyClause(clause));
            }
            if lits.len() > MAX_LITERALS {
                return Err(CnfError::TooManyLiterals {
                    clause,
                    literals: lits.len(),
                });
            }
        }
        Ok(Self { clauses })
    }

    pub fn always() -> Self {
        Self::default()
    }

    pub fn clauses(&self) -> &[Vec<Literal>] {
        &self.clauses
    }

    pub fn literal_count(&self) -> usize {
        self.clauses.iter().map(Vec::len).sum()
    }

    pub fn eval(&self, hops: &[HopMetadata]) -> bool {
        self.clauses
            .iter()
            .all(|clause| clause.iter().any(|lit| lit.eval(hops)))
    }

    pub fn to_register(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.literal_count() * LITERAL_RECORD_LEN);
        for (ci, clause) in self.clauses.iter().enumerate() {
            for lit in clause {
                out.push(lit.metadata.slot() as u8);
                out.push(lit.cmp.code());
                out.push(match lit.aggregate {
                    Aggregate::Sum => 0,
                    Aggregate::Max => 1,
                });
                out.push(0);
                out.extend_from_slice(&lit.constant.to_be_bytes());
                out.extend_from_slice(&(ci as u32).to_be_bytes());
            }
        }
        out
    }

    pub fn from_register(buf: &[u8]) -> Result<Self, CnfError> {
        if buf.len() % LITERAL_RECORD_LEN != 0 {
            return Err(CnfError::RaggedRegister(buf.len()));
        }
        let mut clauses: Vec<Vec<Literal>> = Vec::new();
        for (index, rec) in buf.chunks_exact(LITERAL_RECORD_LEN).enumerate() {
            let bad = |field, code: u8| CnfError::BadCode {
                index,
                field,
                code: u32::from(code),
            };
            let metadata =
                MetadataKind::from_slot(usize::from(rec[0])).ok_or_else(|| bad("metadata", rec[0]))?;
            let cmp = Comparator::from_code(rec[1]).ok_or_else(|| bad("comparator", rec[1]))?;
            let aggregate = match rec[2] {
                0 => Aggregate::Sum,
                1 => Aggregate::Max,
                c => return Err(bad("aggregate", c)),
            };
            let constant = u32::from_be_bytes([rec[4], rec[5], rec[6], rec[7]]);
            let clause = u32::from_be_bytes([rec[8], rec[9], rec[10], rec[11]]);
            let lit = Literal {
                metadata,
                cmp,
                constant,
                aggregate,
            };
            let current = clauses.len() as u32;
            if clause + 1 == current {
                clauses.last_mut().expect("nonempty").push(lit);
            } else if clause == current {
                clauses.push(vec![lit]);
            } else {
                return Err(CnfError::ClauseOrder { index, clause });
            }
        }
        Self::new(clauses)
    }
}

impl fmt::Display for CnfExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.clauses.is_empty() {
            return f.write_str("true");
        }
        for (i, clause) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            f.write_str("(")?;
            for (j, lit) in clause.iter().enumerate() {
                if j > 0 {
                    f.write_str(" or ")?;
                }
                write!(f, "{lit}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

pub fn eval_cnf(expr: &CnfExpression, hops: &[HopMetadata]) -> super::Verdict {
    let event = expr.eval(hops);
    super::Verdict {
        event,
        observed: u32::from(event),
    }
}

/// Expression registers indexed by the `complex_detection` parameter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionRegisters {
    slots: Vec<Vec<u8>>,
}

impl ExpressionRegisters {
    pub fn write(&mut self, index: usize, expr: &CnfExpression) {
        if self.slots.len() <= index {
            self.slots.resize(index + 1, Vec::new());
        }
        self.slots[index] = expr.to_register();
    }

    pub fn raw(&self, index: usize) -> Option<&[u8]> {
        self.slots.get(index).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn read(&self, index: usize) -> Option<Result<CnfExpression, CnfError>> {
        self.raw(index).map(CnfExpression::from_register)
    }
}
