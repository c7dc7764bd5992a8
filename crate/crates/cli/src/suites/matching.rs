//! The match engine against a flat list-scan reference matcher, and the
//! same ordering rules observed through a running universe.

use std::collections::{BTreeMap, HashMap};

use mmp_core::frame::{ContextId, EnvelopeHeader, MessageEnvelope};
use mmp_core::matching::{MatchEngine, PostedReceive, RequestId, Source, TagSelector};
use mmp_core::{run_in_process, DatatypeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LIVE: [u32; 3] = [1, 2, 3];
const DEAD: u32 = 9;
const INTERNAL_TAG: u32 = 32768;

#[derive(Debug, Clone, Copy)]
enum Event {
    Deliver { ctx: u32, source: u32, tag: u32 },
    Post { ctx: u32, source: Option<u32>, tag: Option<u32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Matched { post: u64, msg: u64 },
    Queued,
    Dropped,
}

fn random_schedule(rng: &mut ChaCha8Rng) -> Vec<Event> {
    let len = rng.gen_range(1..80);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let ctx = if rng.gen_bool(0.05) { DEAD } else { LIVE[rng.gen_range(0..3)] };
                let tag = if rng.gen_bool(0.1) { INTERNAL_TAG } else { rng.gen_range(0..3) };
                Event::Deliver { ctx, source: rng.gen_range(0..3), tag }
            } else {
                Event::Post {
                    ctx: LIVE[rng.gen_range(0..3)],
                    source: rng.gen_bool(0.6).then(|| rng.gen_range(0..3)),
                    tag: rng.gen_bool(0.6).then(|| rng.gen_range(0..3)),
                }
            }
        })
        .collect()
}

/// Runs a schedule through the engine. Event `i` gets id `i`.
fn run_engine(schedule: &[Event]) -> (Vec<Outcome>, usize, usize) {
    let mut m = MatchEngine::new();
    for c in LIVE {
        m.open_context(ContextId(c)).unwrap();
    }
    let mut out = Vec::new();
    for (i, ev) in schedule.iter().enumerate() {
        let id = i as u64;
        let res = match *ev {
            Event::Deliver { ctx, source, tag } => {
                let header = EnvelopeHeader {
                    context: ContextId(ctx),
                    source,
                    dest: 0,
                    tag,
                    dtype: DatatypeKind::Int64,
                    count: 1,
                };
                let env = MessageEnvelope::new(header, id.to_le_bytes().to_vec()).unwrap();
                m.deliver(env)
            }
            Event::Post { ctx, source, tag } => {
                let recv = PostedReceive {
                    request: RequestId(id),
                    source: source.map_or(Source::Any, Source::Rank),
                    tag: tag.map_or(TagSelector::Any, TagSelector::Tag),
                    capacity: 1,
                    dtype: DatatypeKind::Int64,
                    peer: None,
                };
                m.post_receive(ContextId(ctx), recv)
            }
        };
        out.push(match res {
            Err(_) => Outcome::Dropped,
            Ok(None) => Outcome::Queued,
            Ok(Some((recv, env))) => {
                let post_ctx = match schedule[recv.request.0 as usize] {
                    Event::Post { ctx, .. } => ctx,
                    Event::Deliver { .. } => panic!("a delivery was returned as a posted receive"),
                };
                assert_eq!(env.header.context.0, post_ctx, "cross-context match");
                let msg = u64::from_le_bytes(env.payload[..8].try_into().unwrap());
                Outcome::Matched { post: recv.request.0, msg }
            }
        });
    }
    let unexpected = LIVE.iter().map(|&c| m.unexpected_len(ContextId(c))).sum();
    let posted = LIVE.iter().map(|&c| m.posted_len(ContextId(c))).sum();
    (out, unexpected, posted)
}

/// One flat list of arrivals and one of receives; every lookup scans from the front.
fn run_reference(schedule: &[Event]) -> (Vec<Outcome>, usize, usize) {
    struct Arrival {
        id: u64,
        ctx: u32,
        source: u32,
        tag: u32,
        consumed: bool,
    }
    struct Recv {
        id: u64,
        ctx: u32,
        source: Option<u32>,
        tag: Option<u32>,
        done: bool,
    }
    let selects = |source: Option<u32>, tag: Option<u32>, a_source: u32, a_tag: u32| {
        source.is_none_or(|s| s == a_source)
            && match tag {
                None => a_tag <= 32767,
                Some(t) => t == a_tag,
            }
    };
    let mut arrivals: Vec<Arrival> = Vec::new();
    let mut recvs: Vec<Recv> = Vec::new();
    let mut out = Vec::new();
    for (i, ev) in schedule.iter().enumerate() {
        let id = i as u64;
        match *ev {
            Event::Deliver { ctx, source, tag } => {
                if !LIVE.contains(&ctx) {
                    out.push(Outcome::Dropped);
                    continue;
                }
                let hit = recvs
                    .iter_mut()
                    .find(|r| !r.done && r.ctx == ctx && selects(r.source, r.tag, source, tag));
                match hit {
                    Some(r) => {
                        r.done = true;
                        out.push(Outcome::Matched { post: r.id, msg: id });
                    }
                    None => {
                        arrivals.push(Arrival { id, ctx, source, tag, consumed: false });
                        out.push(Outcome::Queued);
                    }
                }
            }
            Event::Post { ctx, source, tag } => {
                let hit = arrivals
                    .iter_mut()
                    .find(|a| !a.consumed && a.ctx == ctx && selects(source, tag, a.source, a.tag));
                match hit {
                    Some(a) => {
                        a.consumed = true;
                        out.push(Outcome::Matched { post: id, msg: a.id });
                    }
                    None => {
                        recvs.push(Recv { id, ctx, source, tag, done: false });
                        out.push(Outcome::Queued);
                    }
                }
            }
        }
    }
    let unexpected = arrivals.iter().filter(|a| !a.consumed).count();
    let posted = recvs.iter().filter(|r| !r.done).count();
    (out, unexpected, posted)
}


/// Per-schedule totals from the reference comparison.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStats {
    pub schedules: usize,
    pub matched: usize,
    pub cross_context: usize,
    pub overtaken: usize,
    pub unconserved: usize,
}

/// Streams of specific receives must take messages in arrival order.
fn overtakings(schedule: &[Event], out: &[Outcome]) -> usize {
    let mut last: HashMap<(u32, u32, u32), u64> = HashMap::new();
    let mut pairs: Vec<(u64, u64)> = out
        .iter()
        .filter_map(|o| match *o {
            Outcome::Matched { post, msg } => Some((post, msg)),
            _ => None,
        })
        .collect();
    pairs.sort_unstable();
    let mut bad = 0;
    for (post, msg) in pairs {
        let Event::Post { ctx, source: Some(s), tag: Some(t) } = schedule[post as usize] else {
            continue;
        };
        if last.get(&(ctx, s, t)).is_some_and(|&prev| msg <= prev) {
            bad += 1;
        }
        last.insert((ctx, s, t), msg);
    }
    bad
}

fn cross_context(schedule: &[Event], out: &[Outcome]) -> usize {
    let ctx = |i: u64| match schedule[i as usize] {
        Event::Deliver { ctx, .. } | Event::Post { ctx, .. } => ctx,
    };
    out.iter()
        .filter(|o| matches!(**o, Outcome::Matched { post, msg } if ctx(post) != ctx(msg)))
        .count()
}

/// Runs `schedules` seeded random schedules through the engine and the
/// reference. Any divergence is an error; the counts cover the ordering,
/// isolation and conservation properties on top of it.
pub fn reference_equivalence(schedules: u64, seed: u64) -> Result<ScheduleStats, String> {
    let mut stats = ScheduleStats::default();
    for s in 0..schedules {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let schedule = random_schedule(&mut rng);
        let got = run_engine(&schedule);
        let want = run_reference(&schedule);
        if got != want {
            return Err(format!("schedule {s} diverges from the reference: {schedule:?}"));
        }
        let (out, unexpected, posted) = &got;
        let deliveries = schedule.iter().filter(|e| matches!(e, Event::Deliver { .. })).count();
        let matches = out.iter().filter(|o| matches!(o, Outcome::Matched { .. })).count();
        let dropped = out.iter().filter(|o| matches!(o, Outcome::Dropped)).count();
        if deliveries != matches + unexpected + dropped || schedule.len() - deliveries != matches + posted {
            stats.unconserved += 1;
        }
        stats.schedules += 1;
        stats.matched += matches;
        stats.cross_context += cross_context(&schedule, out);
        stats.overtaken += overtakings(&schedule, out);
    }
    if stats.cross_context + stats.overtaken + stats.unconserved > 0 {
        return Err(format!("{stats:?}"));
    }
    Ok(stats)
}

/// Every rank sends numbered messages on a few tags to every rank, through
/// the world and a duplicate, then receives them with wildcard and specific
/// selectors. Sequence numbers per (context, source, tag) must arrive in
/// order, nothing crosses communicators, and once quiescent every message
/// sent has been matched.
pub fn live_ordering(np: u32, seed: u64) -> Result<(), String> {
    const PER: i64 = 6;
    const TAGS: u32 = 3;
    let failures = run_in_process(np, |u| {
        let w = u.world();
        let dup = w.dup().unwrap();
        let (me, n) = (u.rank(), u.size());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(me));
        let before = u.match_stats();
        let sent_before = u.messages_sent();
        // Marker: world messages carry +1 in the top field, dup messages -1.
        for dest in 0..n {
            for seq in 0..PER {
                for tag in 0..TAGS {
                    w.send(&[1, me as i64, seq], dest, tag).unwrap();
                    dup.send(&[-1, me as i64, seq], dest, tag).unwrap();
                }
            }
        }
        let mut errors = Vec::new();
        for (comm, marker) in [(&dup, -1), (w, 1)] {
            let mut next: HashMap<(i64, u32), i64> = HashMap::new();
            let mut left: BTreeMap<(u32, u32), i64> = (0..n).flat_map(|s| (0..TAGS).map(move |t| ((s, t), PER))).collect();
            for _ in 0..n as i64 * PER * TAGS as i64 {
                let mut m = [0i64; 3];
                // Selectors only name (source, tag) streams with messages left.
                let open: Vec<(u32, u32)> = left.iter().filter(|(_, &c)| c > 0).map(|(&k, _)| k).collect();
                let (s, t) = open[rng.gen_range(0..open.len())];
                let st = match rng.gen_range(0..4) {
                    0 => comm.recv(&mut m, Source::Any, TagSelector::Any),
                    1 => comm.recv(&mut m, Source::Any, t),
                    2 => comm.recv(&mut m, s, TagSelector::Any),
                    _ => comm.recv(&mut m, s, t),
                };
                let st = match st {
                    Ok(st) => st,
                    Err(e) => {
                        errors.push(e.to_string());
                        break;
                    }
                };
                if m[0] != marker {
                    errors.push(format!("a message crossed communicators: {m:?}"));
                }
                *left.entry((st.source, st.tag)).or_insert(0) -= 1;
                let expect = next.entry((m[1], st.tag)).or_insert(0);
                if m[2] != *expect {
                    errors.push(format!("from {} tag {}: seq {} before {}", m[1], st.tag, m[2], expect));
                }
                *expect = m[2] + 1;
            }
        }
        w.barrier().unwrap();
        let after = u.match_stats();
        let user_sent = u.messages_sent() - sent_before;
        drop(dup);
        // Conservation: everything delivered was matched, nothing queued.
        if u.unexpected_len(w) != 0 || after.delivered - before.delivered < (2 * n as i64 * PER * TAGS as i64) as u64 {
            errors.push(format!("rank {me}: stats {after:?}, sent {user_sent}"));
        }
        if after.delivered - before.delivered != after.matched - before.matched {
            errors.push(format!("rank {me}: delivered and matched diverge: {before:?} -> {after:?}"));
        }
        errors
    });
    let all: Vec<String> = failures.into_iter().flatten().collect();
    if all.is_empty() {
        Ok(())
    } else {
        Err(all.join("; "))
    }
}
