use crate::error::{Error, Result};

use super::TokenizedRecipe;

/// New per-instruction lengths after proportional trimming to `cap` tokens.
///
/// With `T` total tokens and `R = T - cap`, instruction `i` first loses
/// `floor(R * len_i / T)` tokens. The leftover deficit is removed one token at a
/// time from whichever instruction is currently longest (lowest index on ties).
/// Non-empty instructions always keep at least one token.
pub fn trim_lengths(lengths: &[usize], cap: usize) -> Result<Vec<usize>> {
    let non_empty = lengths.iter().filter(|&&l| l > 0).count();
    if cap < non_empty {
        return Err(Error::TrimCap {
            cap,
            instructions: non_empty,
        });
    }
    let total: usize = lengths.iter().sum();
    if total <= cap {
        return Ok(lengths.to_vec());
    }
    let excess = total - cap;
    let mut out: Vec<usize> = lengths
        .iter()
        .map(|&l| l - (excess as u128 * l as u128 / total as u128) as usize)
        .collect();
    let mut deficit = out.iter().sum::<usize>() - cap;
    while deficit > 0 {
        // first maximum wins ties
        let (idx, &longest) =
            out.iter()
                .enumerate()
                .fold((0, &0), |best, cur| if cur.1 > best.1 { cur } else { best });
        debug_assert!(
            longest > 1,
            "deficit left with all instructions at one token"
        );
        out[idx] -= 1;
        deficit -= 1;
    }
    Ok(out)
}

/// Trims instruction tails so the recipe holds at most `cap` instruction tokens.
pub fn trim_instructions(recipe: &TokenizedRecipe, cap: usize) -> Result<TokenizedRecipe> {
    let lengths = recipe.instruction_lengths();
    let kept = trim_lengths(&lengths, cap)?;
    if kept == lengths {
        return Ok(recipe.clone());
    }
    let mut tokens = Vec::with_capacity(cap);
    let mut boundaries = vec![0];
    for (i, &keep) in kept.iter().enumerate() {
        tokens.extend_from_slice(&recipe.instruction(i)[..keep]);
        boundaries.push(tokens.len());
    }
    Ok(TokenizedRecipe {
        instruction_tokens: tokens,
        boundaries,
        ..recipe.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn proportional_shares() {
        assert_eq!(
            trim_lengths(&[200, 100, 100], 300).unwrap(),
            vec![150, 75, 75]
        );
    }

    #[test]
    fn under_cap_is_identity() {
        assert_eq!(trim_lengths(&[10, 10], 300).unwrap(), vec![10, 10]);
    }

    #[test]
    fn deficit_goes_to_longest_lowest_index() {
        assert_eq!(trim_lengths(&[7, 7, 7], 20).unwrap(), vec![6, 7, 7]);
    }

    #[test]
    fn cap_below_instruction_count_is_error() {
        assert!(matches!(
            trim_lengths(&[3, 3, 3], 2),
            Err(Error::TrimCap {
                cap: 2,
                instructions: 3
            })
        ));
    }

    #[test]
    fn trims_token_tails() {
        let r = TokenizedRecipe {
            id: "r".into(),
            ingredient_tokens: vec![vec![2]],
            instruction_tokens: vec![10, 11, 12, 13, 20, 21],
            boundaries: vec![0, 4, 6],
            class_id: 0,
            image_feature_ref: "r".into(),
        };
        let t = trim_instructions(&r, 3).unwrap();
        assert_eq!(t.instruction_tokens, vec![10, 11, 20]);
        assert_eq!(t.boundaries, vec![0, 2, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn total_is_min_of_total_and_cap(
            lengths in prop::collection::vec(0usize..120, 1..12),
            cap_extra in 0usize..400,
        ) {
            let non_empty = lengths.iter().filter(|&&l| l > 0).count();
            let cap = non_empty + cap_extra;
            let out = trim_lengths(&lengths, cap).unwrap();
            let total: usize = lengths.iter().sum();
            prop_assert_eq!(out.iter().sum::<usize>(), total.min(cap));
            for (&before, &after) in lengths.iter().zip(&out) {
                prop_assert!(after <= before);
                prop_assert!(before == 0 || after >= 1);
            }
            prop_assert_eq!(trim_lengths(&lengths, cap).unwrap(), out);
        }
    }
}
