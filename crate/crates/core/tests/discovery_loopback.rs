mod common;

use std::net::UdpSocket;
use std::time::{Duration, Instant};

use common::*;
use tagstream::discovery::{start_announcer, DiscoveryConfig, Finder, SourceAdvertisement};

fn cfg(port: u16, interval_ms: u64) -> DiscoveryConfig {
    DiscoveryConfig::default().with_port(port).with_interval(Duration::from_millis(interval_ms)).loopback_only()
}

#[test]
fn appears_then_expires() {
    let port = free_udp_port();
    let c = cfg(port, 100);
    let finder = Finder::bind(&c).unwrap();
    let ad = SourceAdvertisement::new("cam1", "public", loopback(), 5960).unwrap();
    let announcer = start_announcer(ad.clone(), &c).unwrap();
    let t0 = Instant::now();
    assert!(finder.wait_for(Duration::from_secs(2), |s| !s.is_empty()).is_some());
    assert!(t0.elapsed() <= c.announce_interval * 2, "{:?}", t0.elapsed());
    assert_eq!(finder.lookup("public", "cam1").unwrap().endpoint(), ad.endpoint());
    assert!(announcer.datagrams_sent() >= 1);

    announcer.stop();
    let stopped = Instant::now();
    assert!(finder.wait_for(Duration::from_secs(3), |s| s.is_empty()).is_some());
    assert!(stopped.elapsed() <= c.ttl + c.announce_interval, "{:?}", stopped.elapsed());
}

#[test]
fn two_sources_sorted_and_malformed_ignored() {
    let port = free_udp_port();
    let c = cfg(port, 100);
    let finder = Finder::bind(&c).unwrap();
    let _b = start_announcer(SourceAdvertisement::new("zeta", "public", loopback(), 7000).unwrap(), &c).unwrap();
    let _a = start_announcer(SourceAdvertisement::new("alpha", "public", loopback(), 7001).unwrap(), &c).unwrap();
    let junk = UdpSocket::bind("127.0.0.1:0").unwrap();
    junk.send_to(b"TSRM-ANN v2 public x 127.0.0.1 1", ("127.0.0.1", port)).unwrap();
    junk.send_to(&[0xff; 40], ("127.0.0.1", port)).unwrap();
    let sources = finder.wait_for(Duration::from_secs(2), |s| s.len() == 2).expect("both sources");
    let names: Vec<&str> = sources.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, vec!["alpha", "zeta"]);
    assert!(wait_until(Duration::from_secs(1), || finder.malformed_count() >= 2));
}

#[test]
fn unspecified_host_becomes_sender_address() {
    let port = free_udp_port();
    let c = cfg(port, 100);
    let finder = Finder::bind(&c).unwrap();
    let any = "0.0.0.0".parse().unwrap();
    let _a = start_announcer(SourceAdvertisement::new("wild", "public", any, 7002).unwrap(), &c).unwrap();
    let sources = finder.wait_for(Duration::from_secs(2), |s| !s.is_empty()).unwrap();
    assert_eq!(sources[0].host, loopback());
}

#[test]
fn restarted_source_wins_with_new_port() {
    let port = free_udp_port();
    let c = cfg(port, 100);
    let finder = Finder::bind(&c).unwrap();
    let first = start_announcer(SourceAdvertisement::new("cam", "public", loopback(), 8000).unwrap(), &c).unwrap();
    assert!(finder.wait_for(Duration::from_secs(2), |s| s.iter().any(|a| a.port == 8000)).is_some());
    first.stop();
    let _second = start_announcer(SourceAdvertisement::new("cam", "public", loopback(), 8001).unwrap(), &c).unwrap();
    let sources = finder.wait_for(Duration::from_secs(2), |s| s.iter().any(|a| a.port == 8001)).unwrap();
    assert_eq!(sources.len(), 1);
}
