use proptest::prelude::*;
use sopbench_core::sop::{SopEntry, SopPipeline};
use sopbench_core::{CanonicalAction, Direction};

pub fn one_line_text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ',.:&*?!-]{0,24}"
}

pub fn direction() -> impl Strategy<Value = Direction> {
    prop::sample::select(Direction::ALL.to_vec())
}

pub fn canonical_action() -> impl Strategy<Value = CanonicalAction> {
    prop_oneof![
        (-1i64..500, one_line_text(), "[A-Z][A-Z_]{0,15}")
            .prop_map(|(element_id, text, ui_type)| CanonicalAction::Click { element_id, text, ui_type }),
        direction().prop_map(|direction| CanonicalAction::Scroll { direction }),
        one_line_text().prop_map(|text| CanonicalAction::TypeText { text }),
        Just(CanonicalAction::PressBack),
        Just(CanonicalAction::PressHome),
        Just(CanonicalAction::PressEnter),
        Just(CanonicalAction::TaskComplete),
        Just(CanonicalAction::TaskImpossible),
    ]
}

pub fn pipeline() -> impl Strategy<Value = SopPipeline> {
    prop::collection::vec(("[a-z][a-z0-9 ',:*&]{0,24}[a-z0-9']", 1usize..4), 1..7).prop_map(|parts| {
        let mut step = 0;
        let entries = parts
            .into_iter()
            .enumerate()
            .map(|(id, (description, span))| {
                let e = SopEntry { id, description, first_step: step, last_step: step + span - 1 };
                step += span;
                e
            })
            .collect();
        SopPipeline { entries }
    })
}
