//! Round-trip and traffic accounting.

use std::collections::BTreeMap;
use std::fmt;

use super::Endpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkClass {
    CnDpm,
    CnCoord,
    CnMs,
    CoordDpm,
    MsDpm,
    /// Anything else (e.g. MS pushes to CNs).
    Other,
}

impl LinkClass {
    pub fn between(issuer: Endpoint, target: Endpoint) -> LinkClass {
        use Endpoint::*;
        match (issuer, target) {
            (Cn(_), Dpm(_)) => LinkClass::CnDpm,
            (Cn(_), Coord) | (Coord, Cn(_)) => LinkClass::CnCoord,
            (Cn(_), Ms) | (Ms, Cn(_)) => LinkClass::CnMs,
            (Coord, Dpm(_)) => LinkClass::CoordDpm,
            (Ms, Dpm(_)) => LinkClass::MsDpm,
            _ => LinkClass::Other,
        }
    }

    pub const ALL: [LinkClass; 6] = [
        LinkClass::CnDpm,
        LinkClass::CnCoord,
        LinkClass::CnMs,
        LinkClass::CoordDpm,
        LinkClass::MsDpm,
        LinkClass::Other,
    ];
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LinkClass::CnDpm => "cn-dpm",
            LinkClass::CnCoord => "cn-coord",
            LinkClass::CnMs => "cn-ms",
            LinkClass::CoordDpm => "coord-dpm",
            LinkClass::MsDpm => "ms-dpm",
            LinkClass::Other => "other",
        };
        f.write_str(s)
    }
}

/// Kind of a metered round. A batch mixing kinds is `Mixed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoundClass {
    Read,
    Write,
    Cas,
    Rpc,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Path {
    /// On the issuing operation's critical path.
    Critical,
    /// Posted asynchronously (unsignaled writes, background batches).
    Background,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Meter {
    pub rtts: BTreeMap<(LinkClass, RoundClass, Path), u64>,
    pub bytes_sent: BTreeMap<LinkClass, u64>,
    pub bytes_received: BTreeMap<LinkClass, u64>,
    /// Payload-carrying bytes (writes, reads and RPC values wider than one word).
    pub data_bytes: BTreeMap<LinkClass, u64>,
    /// Bytes through each endpoint instance, both directions.
    pub endpoint_bytes: BTreeMap<Endpoint, u64>,
}

impl Meter {
    pub fn add_round(&mut self, link: LinkClass, class: RoundClass, path: Path) {
        *self.rtts.entry((link, class, path)).or_insert(0) += 1;
    }

    pub fn add_sent(&mut self, issuer: Endpoint, target: Endpoint, bytes: u64, data: u64) {
        let link = LinkClass::between(issuer, target);
        *self.bytes_sent.entry(link).or_insert(0) += bytes;
        *self.data_bytes.entry(link).or_insert(0) += data;
        *self.endpoint_bytes.entry(issuer).or_insert(0) += bytes;
        *self.endpoint_bytes.entry(target).or_insert(0) += bytes;
    }

    pub fn add_received(&mut self, issuer: Endpoint, target: Endpoint, bytes: u64, data: u64) {
        let link = LinkClass::between(issuer, target);
        *self.bytes_received.entry(link).or_insert(0) += bytes;
        *self.data_bytes.entry(link).or_insert(0) += data;
        *self.endpoint_bytes.entry(issuer).or_insert(0) += bytes;
        *self.endpoint_bytes.entry(target).or_insert(0) += bytes;
    }

    pub fn total_rtts(&self) -> u64 {
        self.rtts.values().sum()
    }

    pub fn critical_rtts(&self) -> u64 {
        self.rtts
            .iter()
            .filter(|((_, _, p), _)| *p == Path::Critical)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn rtts_on(&self, link: LinkClass) -> u64 {
        self.rtts
            .iter()
            .filter(|((l, _, _), _)| *l == link)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn link_bytes(&self, link: LinkClass) -> u64 {
        self.bytes_sent.get(&link).copied().unwrap_or(0) + self.bytes_received.get(&link).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        LinkClass::ALL.iter().map(|l| self.link_bytes(*l)).sum()
    }

    pub fn total_data_bytes(&self) -> u64 {
        self.data_bytes.values().sum()
    }

    pub fn device_bytes(&self, device: u16) -> u64 {
        self.endpoint_bytes.get(&Endpoint::Dpm(device)).copied().unwrap_or(0)
    }

    /// Component-wise difference `self - earlier`.
    pub fn since(&self, earlier: &Meter) -> Meter {
        fn diff<K: Ord + Copy>(a: &BTreeMap<K, u64>, b: &BTreeMap<K, u64>) -> BTreeMap<K, u64> {
            a.iter()
                .map(|(k, v)| (*k, v - b.get(k).copied().unwrap_or(0)))
                .filter(|(_, v)| *v != 0)
                .collect()
        }
        Meter {
            rtts: diff(&self.rtts, &earlier.rtts),
            bytes_sent: diff(&self.bytes_sent, &earlier.bytes_sent),
            bytes_received: diff(&self.bytes_received, &earlier.bytes_received),
            data_bytes: diff(&self.data_bytes, &earlier.data_bytes),
            endpoint_bytes: diff(&self.endpoint_bytes, &earlier.endpoint_bytes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_classes() {
        assert_eq!(LinkClass::between(Endpoint::Cn(0), Endpoint::Dpm(1)), LinkClass::CnDpm);
        assert_eq!(
            LinkClass::between(Endpoint::Coord, Endpoint::Dpm(1)),
            LinkClass::CoordDpm
        );
        assert_eq!(LinkClass::between(Endpoint::Ms, Endpoint::Cn(2)), LinkClass::CnMs);
    }

    #[test]
    fn since_subtracts() {
        let mut m = Meter::default();
        m.add_round(LinkClass::CnDpm, RoundClass::Read, Path::Critical);
        let snap = m.clone();
        m.add_round(LinkClass::CnDpm, RoundClass::Read, Path::Critical);
        m.add_sent(Endpoint::Cn(0), Endpoint::Dpm(0), 24, 0);
        let d = m.since(&snap);
        assert_eq!(d.total_rtts(), 1);
        assert_eq!(d.link_bytes(LinkClass::CnDpm), 24);
        assert_eq!(d.device_bytes(0), 24);
    }
}
