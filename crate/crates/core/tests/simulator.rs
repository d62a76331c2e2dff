use std::fs;

use ksda::keyboard::{KeyboardLayout, Point};
use ksda::rng::stream;
use ksda::simulator::trajectory::{key_at, transition_point};
use ksda::simulator::*;
use proptest::prelude::*;

fn renderer() -> Renderer {
    Renderer::new(KeyboardLayout::qwerty(), 25, 50).unwrap()
}

#[test]
fn frame_counts_follow_construction() {
    let kb = KeyboardLayout::qwerty();
    let t = generate_trajectory("ab", &TypingStyle::synthetic(), &kb, &mut stream(1, "x")).unwrap();
    assert_eq!(t.press_flags.iter().filter(|&&p| p).count(), 2);
    assert_eq!(t.len(), 2 + 3);
    // n characters: n dwell frames plus three per transition.
    let s = "the quick brown fox";
    let t = generate_trajectory(s, &TypingStyle::synthetic(), &kb, &mut stream(1, "x")).unwrap();
    assert_eq!(t.len(), s.len() + 3 * (s.len() - 1));
}

#[test]
fn curved_transition_bows_away_from_chord() {
    let kb = KeyboardLayout::qwerty();
    let mut style = TypingStyle::pseudo_real();
    style.curvature = 0.5;
    style.path_noise_sigma = 0.0;
    style.frames_per_transition = CountDist::fixed(3);
    style.dwell_frames = CountDist::fixed(1);
    let t = generate_trajectory("wh", &style, &kb, &mut stream(5, "c")).unwrap();
    let (w, h) = (kb.key_center('w').unwrap(), kb.key_center('h').unwrap());
    // Frames: press w, three intermediates (t = 1/4, 1/2, 3/4), press h.
    let mid = t.positions[2];
    let chord_mid = w.lerp(h, 0.5);
    let deviation = mid.dist(chord_mid);
    assert!(deviation > 0.0);
    // Quadratic Bézier at t = 1/2 sits halfway to the control point.
    assert!((deviation - 0.5 * 0.5 * w.dist(h)).abs() < 1e-9);
    // And perpendicular to the chord.
    let (cx, cy) = (h.x - w.x, h.y - w.y);
    assert!(((mid.x - chord_mid.x) * cx + (mid.y - chord_mid.y) * cy).abs() < 1e-9);
    let p = transition_point(&style, w, h, 0.5, -1.0);
    assert!((p.dist(chord_mid) - deviation).abs() < 1e-12);
}

#[test]
fn linear_intermediates_lie_on_chord() {
    let kb = KeyboardLayout::qwerty();
    let s = "keyboard inference";
    let t = generate_trajectory(s, &TypingStyle::synthetic(), &kb, &mut stream(2, "l")).unwrap();
    let press_idx: Vec<usize> = (0..t.len()).filter(|&i| t.press_flags[i]).collect();
    for w in press_idx.windows(2) {
        let (a, b) = (t.positions[w[0]], t.positions[w[1]]);
        for p in &t.positions[w[0] + 1..w[1]] {
            let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            assert!(cross.abs() < 1e-9);
            let along = (p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y);
            assert!(along >= -1e-9 && along <= a.dist(b).powi(2) + 1e-9);
        }
    }
}

#[test]
fn sequence_length_grows_with_pace() {
    // Least-squares slope of frame count against sentence length should be
    // close to mean transition frames plus mean dwell.
    let kb = KeyboardLayout::qwerty();
    let style = TypingStyle::pseudo_real();
    let sentences = fallback_sentences(400, 40, &mut stream(9, "s"));
    let pts: Vec<(f64, f64)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = generate_trajectory(s, &style, &kb, &mut stream(i as u64, "len")).unwrap();
            (s.len() as f64, t.len() as f64)
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let expected = (style.frames_per_transition.mean + style.dwell_frames.mean) as f64;
    assert!((slope - expected).abs() < 0.1 * expected, "slope {slope} vs {expected}");
}

proptest! {
    #[test]
    fn presses_spell_the_sentence(s in "[a-z][a-z ]{0,30}[a-z]", seed in any::<u64>(), real in any::<bool>()) {
        let kb = KeyboardLayout::qwerty();
        let style = if real { TypingStyle::pseudo_real() } else { TypingStyle::synthetic() };
        let t = generate_trajectory(&s, &style, &kb, &mut stream(seed, "p")).unwrap();
        prop_assert_eq!(t.press_flags.iter().filter(|&&p| p).count(), s.chars().count());
        prop_assert_eq!(t.pressed_chars(&kb), s.clone());
        for ((p, &pressed), c) in t.positions.iter().zip(&t.press_flags).zip(t.pressed_per_frame()) {
            if pressed {
                let k = kb.key(c.unwrap()).unwrap();
                prop_assert!(p.dist(k.center) <= 0.5 * k.width.min(k.height) + 1e-12);
            }
        }
    }

    #[test]
    fn trajectories_are_seed_deterministic(s in "[a-z ]{1,20}", seed in any::<u64>()) {
        prop_assume!(!s.trim().is_empty());
        let kb = KeyboardLayout::qwerty();
        let st = TypingStyle::pseudo_real();
        let a = generate_trajectory(&s, &st, &kb, &mut stream(seed, "d")).unwrap();
        let b = generate_trajectory(&s, &st, &kb, &mut stream(seed, "d")).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn disc_centroid_matches_projected_key_centre() {
    let r = renderer();
    let style = TypingStyle::synthetic();
    let g = r.layout().key_center('g').unwrap();
    let img = r.render_frame(g, None, &style, &mut stream(0, "g"));
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let w = (img[y * r.width() + x] - r.background()[y * r.width() + x]).abs() as f64;
            sw += w;
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
        }
    }
    // The projected centre of 'g' in pixel space.
    let (px, py) = (g.x * 50.0 / 10.0, g.y * 25.0 / 4.0);
    let (cx, cy) = (sx / sw, sy / sw);
    assert!(((cx - px).powi(2) + (cy - py).powi(2)).sqrt() < 1.0, "centroid ({cx}, {cy}) vs ({px}, {py})");
}

#[test]
fn rendering_without_jitter_ignores_seed() {
    let r = renderer();
    let style = TypingStyle::synthetic();
    let t = generate_trajectory("hello", &style, r.layout(), &mut stream(0, "h")).unwrap();
    let a = r.render_frames(&t, &style, &mut stream(1, "a"));
    let b = r.render_frames(&t, &style, &mut stream(2, "b"));
    assert_eq!(a, b);
    assert_eq!(a.len(), t.len());
    let mut jittered = style.clone();
    jittered.texture_jitter = 0.3;
    let c = r.render_frames(&t, &jittered, &mut stream(1, "a"));
    let d = r.render_frames(&t, &jittered, &mut stream(2, "b"));
    assert_ne!(c, d);
    assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn empty_trajectory_renders_nothing() {
    let r = renderer();
    let t = TrajectorySample { sentence: String::new(), positions: vec![], press_flags: vec![] };
    assert!(r.render_frames(&t, &TypingStyle::synthetic(), &mut stream(0, "e")).is_empty());
}

#[test]
fn keypress_sets() {
    let r = renderer();
    let st = TypingStyle::synthetic();
    assert!(generate_keypress_images(26, &st, &r, 0, false).is_err());
    let set = generate_keypress_images(27, &st, &r, 0, true).unwrap();
    let mut seen = set.labels.clone();
    seen.sort();
    assert_eq!(seen, (0..27).collect::<Vec<_>>());
    assert_eq!(set.images.len(), 27);
    // Every image shows the thumb over its labelled key.
    let chars = r.layout().chars();
    for (i, &l) in set.labels.iter().enumerate() {
        let img = set.images.frame(i);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..25 {
            for x in 0..50 {
                let w = (img[y * 50 + x] - 0.9).max(0.0) as f64;
                sw += w;
                sx += w * (x as f64 + 0.5);
                sy += w * (y as f64 + 0.5);
            }
        }
        let p = Point::new(sx / sw / 5.0, sy / sw / 6.25);
        assert_eq!(key_at(r.layout(), p), chars[l]);
    }
}

#[test]
fn keypress_labels_are_uniform() {
    let r = renderer();
    let n = 27_000;
    let set = generate_keypress_images(n, &TypingStyle::synthetic(), &r, 4, false).unwrap();
    let mut counts = [0usize; 27];
    for &l in &set.labels {
        counts[l] += 1;
    }
    let p = 1.0 / 27.0;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    // 99.9th percentile of chi-square with 26 degrees of freedom.
    assert!(chi2 < 54.05, "chi2 {chi2}");
}

#[test]
fn corpus_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    fs::write(&p, "Rain DELAYS match; 2022\nStorm hits coast\nstorm hits coast\n20030219,council backs plan\n").unwrap();
    assert_eq!(ingest_corpus(&p, 68, CharsetPolicy::Drop).unwrap(), vec!["storm hits coast", "council backs plan"]);
    assert_eq!(ingest_corpus(&p, 16, CharsetPolicy::Drop).unwrap(), vec!["storm hits coast"]);
    let empty = dir.path().join("e.txt");
    fs::write(&empty, "").unwrap();
    assert!(ingest_corpus(&empty, 20, CharsetPolicy::Drop).unwrap().is_empty());
    let err = ingest_corpus(&dir.path().join("missing.txt"), 20, CharsetPolicy::Drop).unwrap_err();
    assert!(err.to_string().contains("missing.txt"));
}

fn items(n: usize) -> Vec<(String, Split)> {
    fallback_sentences(n, 20, &mut stream(3, "items")).into_iter().map(|s| (s, Split::Train)).collect()
}

#[test]
fn dataset_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let r = renderer();
    let style = TypingStyle::pseudo_real();
    let m = generate_dataset(&items(10), &style, &r, &a, 7, false).unwrap();
    assert_eq!(m.entries.len(), 10);
    for e in &m.entries {
        let f = ksda::framefile::FrameFile::load(&a.join(&e.frames_path)).unwrap();
        assert_eq!(f.frames, e.frame_count);
        assert_eq!(e.domain, Domain::PseudoReal);
    }
    generate_dataset(&items(10), &style, &r, &b, 7, false).unwrap();
    for name in fs::read_dir(a.join("frames")).unwrap() {
        let name = name.unwrap().file_name();
        assert_eq!(fs::read(a.join("frames").join(&name)).unwrap(), fs::read(b.join("frames").join(&name)).unwrap());
    }
    assert_eq!(fs::read(a.join("manifest.jsonl")).unwrap(), fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(DatasetManifest::read(&a.join("manifest.jsonl")).unwrap(), m);

    assert!(generate_dataset(&items(3), &style, &r, &a, 7, false).is_err());
    let m = generate_dataset(&items(3), &style, &r, &a, 7, true).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(fs::read_dir(a.join("frames")).unwrap().count(), 3);
}

#[test]
fn sample_streams_are_order_independent() {
    let r = renderer();
    let st = TypingStyle::pseudo_real();
    let (t1, f1) = simulate_sample("x-1", "order", &st, &r, 11).unwrap();
    simulate_sample("x-0", "other text", &st, &r, 11).unwrap();
    let (t2, f2) = simulate_sample("x-1", "order", &st, &r, 11).unwrap();
    assert_eq!((t1, f1), (t2, f2));
}
