use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use int_forge::dataplane::{ForwardVerdict, ForwardingTable, Ipv4Prefix};

/// Addresses from a narrow space so prefixes nest and overlap often.
fn addr(rng: &mut ChaCha8Rng) -> u32 {
    let hi = [0x0A00_0000u32, 0x0A01_0000, 0xC0A8_0000, 0xAC10_0000][rng.gen_range(0..4)];
    hi | rng.gen_range(0..0x1_0000)
}

fn mask(len: u8) -> u32 {
    (!0u64 << (32 - u32::from(len))) as u32
}

#[test]
fn lpm_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f7);
    for round in 0..10 {
        let mut table = ForwardingTable::new();
        // (network, len) -> port; later inserts replace earlier ones
        let mut oracle: BTreeMap<(u32, u8), u16> = BTreeMap::new();
        for _ in 0..rng.gen_range(1..400) {
            let len = if rng.gen_bool(0.02) { 0 } else { rng.gen_range(8..=32) };
            let a = addr(&mut rng);
            let port = rng.gen();
            table.insert(Ipv4Prefix::new(Ipv4Addr::from(a), len).unwrap(), port);
            oracle.insert((a & mask(len), len), port);
        }
        let default = rng.gen_bool(0.5).then(|| rng.gen());
        table.set_default(default);
        assert_eq!(table.len(), oracle.len());
        let mut hits = 0;
        for _ in 0..1000 {
            let ip = addr(&mut rng);
            let want = oracle
                .iter()
                .filter(|((net, len), _)| ip & mask(*len) == *net)
                .max_by_key(|((_, len), _)| *len)
                .map(|(_, &port)| port)
                .or(default);
            let got = table.lookup(Ipv4Addr::from(ip));
            let want = want.map_or(ForwardVerdict::Drop, ForwardVerdict::Port);
            assert_eq!(got, want, "round {round}, {}", Ipv4Addr::from(ip));
            hits += u32::from(got != ForwardVerdict::Drop);
        }
        assert!(hits > 0, "round {round} never matched");
    }
}
