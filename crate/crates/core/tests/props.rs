use plab_core::finetune::{segment_series, LayerGroupPlan};
use plab_core::model::SequenceLayout;
use plab_core::probing::{pool_rows, TokenType};
use plab_core::response::{Query, Responder};
use plab_core::taskgen::{filter_hard, generate, perturb_word, Split, TaskGenConfig, TaskKind};
use proptest::prelude::*;

/// Plain Levenshtein distance; an adjacent swap counts as two edits.
fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        dp[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    dp[a.len()][b.len()]
}

proptest! {
    #[test]
    fn perturbation_is_one_or_two_edits(word in "[a-z]{3,8}", seed in any::<u64>()) {
        let out = perturb_word(&word, seed).unwrap();
        let d = edit_distance(&word, &out);
        prop_assert!((1..=2).contains(&d), "{word} -> {out}: {d}");
    }

    #[test]
    fn all_token_pool_is_the_count_weighted_mean(
        n_img in 1usize..6,
        n_txt in 1usize..9,
        d in 1usize..5,
        vals in proptest::collection::vec(-10.0f64..10.0, 15 * 4),
    ) {
        let rows = 1 + n_img + n_txt;
        let h = &vals[..rows * d];
        let layout = SequenceLayout {
            image_span: 1..1 + n_img,
            text_span: 1 + n_img..rows,
            last_index: rows - 1,
        };
        let all = pool_rows(h, d, &layout, TokenType::All).unwrap();
        let img = pool_rows(h, d, &layout, TokenType::Image).unwrap();
        let txt = pool_rows(h, d, &layout, TokenType::Text).unwrap();
        let (wi, wt) = (n_img as f64 / (n_img + n_txt) as f64, n_txt as f64 / (n_img + n_txt) as f64);
        for k in 0..d {
            prop_assert!((all[k] - (wi * img[k] + wt * txt[k])).abs() < 1e-9);
        }
        let last = pool_rows(h, d, &layout, TokenType::Last).unwrap();
        prop_assert_eq!(&last[..], &h[(rows - 1) * d..]);
    }
}

struct AlwaysYes;

impl Responder for AlwaysYes {
    fn respond(&self, queries: &[Query<'_>], _max_new: usize) -> plab_core::Result<Vec<String>> {
        Ok(vec!["1".to_string(); queries.len()])
    }
}

#[test]
fn always_yes_keeps_about_half() {
    let ds = generate(TaskKind::Structure, 400, 3, Split::Test, &TaskGenConfig { image_px: 16 }).unwrap();
    let r = filter_hard(&ds, &AlwaysYes).unwrap();
    assert_eq!(r.incorrect, 200);
    assert!((r.retention - 0.5).abs() < 0.05, "retention {}", r.retention);
    assert!(r.dataset.len() <= 1);
}

#[test]
fn segmentation_fixtures() {
    let mut acc = vec![0.5; 12];
    for (l, a) in acc.iter_mut().enumerate() {
        *a += 0.002 * l as f64;
        if l >= 5 {
            *a += 0.15;
        }
        if l >= 9 {
            *a += 0.2;
        }
    }
    assert_eq!(segment_series(&acc).unwrap(), LayerGroupPlan::from_boundaries(5, 9, 12).unwrap());

    let noise = [0.004, -0.01, 0.008, 0.0, 0.01, -0.006, 0.002, 0.009, -0.003, 0.001];
    let mut acc = Vec::new();
    let mut level: f64 = 0.5;
    for l in 0..10 {
        if l == 3 {
            level += 0.12;
        }
        if l == 7 {
            level += 0.09;
        }
        acc.push(level + noise[l]);
    }
    let plan = segment_series(&acc).unwrap();
    assert_eq!((plan.middle.start, plan.upper.start), (3, 7));
}
