use plotnpolish_core::planner::{
    generate_plan, refine_plan, ChatMessage, FnLlm, PlannerConfig, PlannerError, Role, ScriptedLlm,
};
use plotnpolish_core::schema::{parse_plan, serialize_plan, ParseMode, StoryIdea, StoryPlan};

const LISTING: &str = include_str!("fixtures/listing1.json");

fn idea() -> StoryIdea {
    StoryIdea::new(
        "A scientist builds a weather machine and befriends a sparrow",
        6,
        "children's picture book",
        "soft watercolor",
    )
    .unwrap()
}

/// Bare planner output (no idea block) for the listing.
fn listing_reply() -> String {
    LISTING.to_string()
}

#[test]
fn first_try_success_gives_two_turns() {
    let llm = ScriptedLlm::new([listing_reply()]);
    let out = generate_plan(&llm, &idea(), &PlannerConfig::default()).unwrap();
    assert_eq!(out.retries, 0);
    assert_eq!(out.conversation.turns.len(), 2);
    assert!(out.conversation.is_well_formed());
    assert_eq!(out.plan.pages.len(), 6);
    assert_eq!(out.plan.pages[0].style_prompt, "soft watercolor");

    // The request carries the system prompt and the idea.
    let request = &llm.requests()[0];
    assert_eq!(request[0].role, Role::System);
    assert!(request[1].content.contains("weather machine"));
    assert!(request[1].content.contains("6"));

    // Output always survives a strict parse.
    let strict = parse_plan(&serialize_plan(&out.plan), ParseMode::Strict).unwrap();
    assert_eq!(strict, out.plan);
}

#[test]
fn malformed_replies_are_retried_with_the_error() {
    let llm = ScriptedLlm::new([
        "Sorry, here is a story: once upon a time".to_string(),
        r#"{"Main Characters": [], "Story": [{"Page": 1}]}"#.to_string(),
        listing_reply(),
    ]);
    let out = generate_plan(&llm, &idea(), &PlannerConfig::default()).unwrap();
    assert_eq!(out.retries, 2);
    assert_eq!(llm.call_count(), 3);
    // Retries stay out of the kept conversation.
    assert_eq!(out.conversation.turns.len(), 2);

    let third = &llm.requests()[2];
    assert_eq!(third.len(), 6);
    assert_eq!(third[4].role, Role::Assistant);
    assert!(third[5].content.contains("could not be used"));
    assert!(third[5].content.contains("missing"), "{}", third[5].content);
}

#[test]
fn wrong_page_count_is_corrected() {
    let mut short = parse_plan(LISTING, ParseMode::Lenient).unwrap();
    short.pages.truncate(4);
    let llm = ScriptedLlm::new([serialize_plan(&short), listing_reply()]);
    let out = generate_plan(&llm, &idea(), &PlannerConfig::default()).unwrap();
    assert_eq!(out.retries, 1);
    assert!(llm.requests()[1].last().unwrap().content.contains("expected 6 pages, got 4"));
}

#[test]
fn exhausted_retries_reject_with_last_output() {
    let cfg = PlannerConfig {
        max_retries: 1,
        ..PlannerConfig::default()
    };
    let llm = ScriptedLlm::new(["nope", "still not json"]);
    match generate_plan(&llm, &idea(), &cfg) {
        Err(PlannerError::PlanRejected {
            attempts,
            last_output,
            ..
        }) => {
            assert_eq!(attempts, 2);
            assert_eq!(last_output, "still not json");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_llm_is_reported() {
    let llm = ScriptedLlm::new(Vec::<String>::new());
    assert!(matches!(
        generate_plan(&llm, &idea(), &PlannerConfig::default()),
        Err(PlannerError::LlmUnavailable(_))
    ));
}

/// Echoes the previous plan with a rename applied when asked.
fn renaming_llm() -> FnLlm<impl Fn(&[ChatMessage]) -> Result<String, PlannerError> + Send + Sync> {
    FnLlm(|messages: &[ChatMessage]| {
        let last = messages.last().unwrap();
        let previous = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.clone());
        match (previous, last.content.strip_prefix("Rename ")) {
            (Some(prev), Some(rest)) => {
                let (from, to) = rest.split_once(" to ").unwrap();
                Ok(prev.replace(from, to))
            }
            _ => Ok(listing_reply()),
        }
    })
}

fn rename_oracle(plan: &StoryPlan, from: &str, to: &str) -> StoryPlan {
    parse_plan(&serialize_plan(plan).replace(from, to), ParseMode::Strict).unwrap()
}

#[test]
fn refinement_applies_only_the_requested_change() {
    let llm = renaming_llm();
    let cfg = PlannerConfig::default();
    let first = generate_plan(&llm, &idea(), &cfg).unwrap();
    let second = refine_plan(&llm, &first.conversation, "Rename Robin to Pip", &cfg).unwrap();
    assert_eq!(second.plan, rename_oracle(&first.plan, "Robin", "Pip"));
    assert_eq!(second.plan.characters[1].name, "Pip");
    assert_eq!(second.plan.characters[0], first.plan.characters[0]);
    assert_eq!(second.plan.idea, first.plan.idea);

    let third = refine_plan(&llm, &second.conversation, "Rename Dr. Mira to Dr. Vega", &cfg).unwrap();
    assert_eq!(third.plan, rename_oracle(&second.plan, "Dr. Mira", "Dr. Vega"));
    // Each call adds one user and one assistant turn.
    assert_eq!(third.conversation.turns.len(), 6);
    assert_eq!(third.conversation.user_turns(), 3);
    assert!(third.conversation.is_well_formed());
    assert_eq!(third.conversation.latest_plan(), Some(&third.plan));
}

#[test]
fn empty_feedback_is_rejected_before_calling() {
    let llm = ScriptedLlm::new([listing_reply()]);
    let cfg = PlannerConfig::default();
    let first = generate_plan(&llm, &idea(), &cfg).unwrap();
    assert!(matches!(
        refine_plan(&llm, &first.conversation, "   ", &cfg),
        Err(PlannerError::Validation(_))
    ));
    assert_eq!(llm.call_count(), 1);
}

#[test]
fn conversation_serializes_with_snapshots() {
    let llm = ScriptedLlm::new([listing_reply()]);
    let out = generate_plan(&llm, &idea(), &PlannerConfig::default()).unwrap();
    let json = serde_json::to_string(&out.conversation).unwrap();
    let back: plotnpolish_core::planner::Conversation = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out.conversation);
}
