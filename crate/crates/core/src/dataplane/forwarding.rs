//! IPv4 longest-prefix-match forwarding table.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::int_wire::FlowKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("malformed prefix `{0}`")]
    Malformed(String),
    #[error("prefix length {0} exceeds 32")]
    Length(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ipv4Prefix {
    addr: u32,
    len: u8,
}

fn netmask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl Ipv4Prefix {
    /// Host bits beyond `len` are cleared.
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, PrefixError> {
        if len > 32 {
            return Err(PrefixError::Length(len));
        }
        Ok(Self {
            addr: u32::from(addr) & netmask(len),
            len,
        })
    }

    pub fn addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr)
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_default(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & netmask(self.len) == self.addr
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr(), self.len)
    }
}

impl FromStr for Ipv4Prefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => (a, l.parse::<u8>().map_err(|_| PrefixError::Malformed(s.into()))?),
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr.parse().map_err(|_| PrefixError::Malformed(s.into()))?;
        Self::new(addr, len)
    }
}

impl Serialize for Ipv4Prefix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardVerdict {
    Port(u16),
    Drop,
}

/// One exact-match map per prefix length, probed from /32 downwards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardingTable {
    by_len: Vec<HashMap<u32, u16>>,
    default_port: Option<u16>,
    entries: usize,
}

impl ForwardingTable {
    pub fn new() -> Self {
        Self {
            by_len: vec![HashMap::new(); 33],
            default_port: None,
            entries: 0,
        }
    }

    /// Returns the previous port for this prefix, if any.
    pub fn insert(&mut self, prefix: Ipv4Prefix, port: u16) -> Option<u16> {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        let prev = self.by_len[usize::from(prefix.len)].insert(prefix.addr, port);
        if prev.is_none() {
            self.entries += 1;
        }
        prev
    }

    pub fn set_default(&mut self, port: Option<u16>) {
        self.default_port = port;
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0 && self.default_port.is_none()
    }

    pub fn lookup(&self, dst: Ipv4Addr) -> ForwardVerdict {
        let ip = u32::from(dst);
        for len in (0..self.by_len.len()).rev() {
            let table = &self.by_len[len];
            if table.is_empty() {
                continue;
            }
            if let Some(&port) = table.get(&(ip & netmask(len as u8))) {
                return ForwardVerdict::Port(port);
            }
        }
        self.default_port
            .map_or(ForwardVerdict::Drop, ForwardVerdict::Port)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Ipv4Prefix, u16)> + '_ {
        self.by_len.iter().enumerate().flat_map(|(len, m)| {
            m.iter().map(move |(&addr, &port)| {
                (
                    Ipv4Prefix {
                        addr,
                        len: len as u8,
                    },
                    port,
                )
            })
        })
    }
}

pub fn forward_lookup(flow: &FlowKey, table: &ForwardingTable) -> ForwardVerdict {
    table.lookup(flow.dst_ip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Ipv4Prefix {
        s.parse().unwrap()
    }

    #[test]
    fn longer_prefix_wins() {
        let mut t = ForwardingTable::new();
        t.insert(p("10.0.0.0/24"), 1);
        t.insert(p("10.0.0.7/32"), 2);
        assert_eq!(t.lookup("10.0.0.7".parse().unwrap()), ForwardVerdict::Port(2));
        assert_eq!(t.lookup("10.0.0.8".parse().unwrap()), ForwardVerdict::Port(1));
        assert_eq!(t.lookup("10.0.1.8".parse().unwrap()), ForwardVerdict::Drop);
    }

    #[test]
    fn empty_table_drops_default_routes() {
        let mut t = ForwardingTable::new();
        assert_eq!(t.lookup(Ipv4Addr::LOCALHOST), ForwardVerdict::Drop);
        t.set_default(Some(9));
        assert_eq!(t.lookup(Ipv4Addr::LOCALHOST), ForwardVerdict::Port(9));
        let mut t = ForwardingTable::default();
        t.insert(p("0.0.0.0/0"), 4);
        assert_eq!(t.lookup(Ipv4Addr::BROADCAST), ForwardVerdict::Port(4));
    }

    #[test]
    fn prefix_parsing() {
        assert_eq!(p("10.1.2.3/8").to_string(), "10.0.0.0/8");
        assert_eq!(p("1.2.3.4").len(), 32);
        assert_eq!("1.2.3.4/33".parse::<Ipv4Prefix>(), Err(PrefixError::Length(33)));
        assert!("1.2.3/8".parse::<Ipv4Prefix>().is_err());
        assert!(p("192.168.0.0/16").contains("192.168.44.1".parse().unwrap()));
    }

    #[test]
    fn reinsert_replaces() {
        let mut t = ForwardingTable::new();
        assert_eq!(t.insert(p("10.0.0.0/8"), 1), None);
        assert_eq!(t.insert(p("10.0.0.0/8"), 2), Some(1));
        assert_eq!(t.len(), 1);
        assert_eq!(t.entries().collect::<Vec<_>>(), vec![(p("10.0.0.0/8"), 2)]);
    }
}
