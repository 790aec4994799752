mod common;

use common::properties as p;

macro_rules! props {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = p::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

props!(
    gradients_match_finite_differences,
    float_expansion_is_exact,
    lowered_max_pool_is_exact,
    autoencoder_grid_points_round_trip,
    em_objective_never_increases,
    dynamic_em_finds_the_best_exponent,
    simulator_matches_quantized_forward,
    small_placements_are_near_optimal,
    placements_beat_random,
    values_survive_json,
);
