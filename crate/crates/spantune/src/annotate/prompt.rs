//! The span-labeling prompt: system text, two worked demonstrations, and
//! the user-message template. `{source}` / `{summary}` are substituted
//! verbatim; everything else is fixed text.

pub const SYSTEM_PROMPT: &str = r#"Your input fields are:
1. `source` (str): The source document.
2. `summary` (str): The summary of the source document.

Your output fields are:
1. `reasoning` (str)
2. `hallucinated_spans` (list[str]): Spans of the summary text that are hallucinated i.e. unfaithful to the source (each span must be a substring of the summary text).

All interactions will be structured in the following way, with the appropriate values filled in.

[[ ## source ## ]]
{source}

[[ ## summary ## ]]
{summary}

[[ ## reasoning ## ]]
{reasoning}

[[ ## hallucinated_spans ## ]]
{hallucinated_spans}        # note: the value you produce must be parseable according to the following JSON schema: {"type": "array", "items": {"type": "string"}}

[[ ## completed ## ]]

In adhering to this structure, your objective is:
    Analyze the provided source text and its summary to identify any portions of the summary that do not accurately reflect the source content. Provide a detailed reasoning for your analysis and list any hallucinated spans—these are sections of the summary text that introduce information not present in the source or misrepresent the source details. Ensure that your reasoning aligns with the source content to justify the identification of hallucinated spans, if any."#;

pub const RESPOND_INSTRUCTION: &str = "Respond with the corresponding output fields, starting with the field `[[ ## reasoning ## ]]`, then `[[ ## hallucinated_spans ## ]]` (must be formatted as a valid Python list[str], and the list of spans must follow original order that they appear in the summary), and then ending with the marker for `[[ ## completed ## ]]`.";

pub const DEMO1_SOURCE: &str = r#"Lenny: Babe, can you help me with something?
Bob: Sure, what's up?
Lenny: Which one should I pick?
Bob: Send me photos
Lenny: <picture>
Lenny: <picture>
Lenny: <picture>
Bob: I like the first ones best
Lenny: But I already have purple trousers. Does it make sense to have two pairs?
Bob: I have four black pairs :D :D
Lenny: yeah, but shouldn't I pick a different color?
Bob: what matters is what you'll give you the most outfit options
Lenny: So I guess I'll buy the first or the third pair then
Bob: Pick the best quality then
Lenny: ur right, thx
Bob: no prob :)"#;

pub const DEMO1_SUMMARY: &str = "Lenny asked Bob for help picking between three pairs of trousers, and Bob recommended choosing the best quality option. Lenny was unsure about picking two pairs of the same color and Bob agreed, suggesting that having more options is important.";

pub const DEMO1_RESPONSE: &str = r#"[[ ## reasoning ## ]]
Lenny was unsure about picking two pairs of the same color, but Bob did not agree with Lenny's reasoning. Instead, Bob suggested that having more options is important.

[[ ## hallucinated_spans ## ]]
["Bob agreed"]

[[ ## completed ## ]]"#;

pub const DEMO2_SOURCE: &str = r#"ARLINGTON, Va. (AP) — Salvage crews have recovered an engine, large sections of fuselage, and are working to retrieve a wing from the wreckage of a commercial airliner involved in last week’s midair collision near Washington’s Reagan National Airport, officials said Monday.

More human remains have been recovered from the Potomac River, bringing the number of identified victims to 55 of the 67 aboard the two aircraft. The collision between an American Airlines jet and an Army Black Hawk helicopter was the deadliest U.S. air disaster since 2001.

Authorities say the operation to remove the plane will take several days, after which the helicopter wreckage will be retrieved. More than 300 responders are participating in the recovery, with two Navy barges assisting in lifting heavy debris. Divers and salvage workers are adhering to strict protocols, pausing recovery efforts when human remains are found.

The American Airlines jet, carrying 64 people, was en route from Wichita, Kansas, preparing to land when it collided with the Army helicopter, which had three personnel aboard on a training mission. There were no survivors. Passengers included figure skaters returning from the 2025 U.S. Figure Skating Championships and a group of hunters.

Family members of victims were escorted by police to the Potomac River on Sunday to pay their respects. Officials hope to recover the jet’s cockpit on Tuesday, with parts of both aircraft transported to a hangar for investigation.

Federal investigators are analyzing conflicting altitude data from the collision. The jet’s flight recorder showed an altitude of 325 feet (99 meters), while control tower data placed the Black Hawk at 200 feet (61 meters), the maximum permitted altitude for helicopters in the area. About a second before impact, the jet’s pitch changed, but investigators have not determined whether it was an evasive maneuver.

Authorities warn against premature speculation about the cause of the crash or why the helicopter may have been above its altitude limit. “There are all kinds of reasons for altitude deviations—something as simple as a flock of birds or an obstacle,” said Col. Mark Ott, deputy director of Army aviation.

The National Transportation Safety Board (NTSB) is working to reconcile the conflicting altitude readings using data from the helicopter’s black box and refining the tower’s data. All five air traffic controllers on duty at Reagan Airport during the collision have been interviewed. A preliminary report is expected within 30 days, though a full investigation may take over a year."#;

pub const DEMO2_SUMMARY: &str = "A midair collision near Washington’s Reagan National Airport between an American Airlines jet and an Army Black Hawk helicopter resulted in 76 fatalities, making it the deadliest U.S. air disaster since 2001. Salvage crews have recovered major wreckage, and the entire wreckage will be recovered within a day. More human remains have been found, with 55 victims identified. Investigators are analyzing conflicting altitude data, as the jet’s flight recorder showed 325 feet while control tower data placed the helicopter at 200 feet. The flight data recorder also indicated the jet made an evasive maneuver right before the crash. Authorities caution against speculation as the National Transportation Safety Board (NTSB) investigates, with a preliminary report expected in 30 days.";

pub const DEMO2_RESPONSE: &str = r#"[[ ## reasoning ## ]]
1. There were 67 people in total on board the two aircrafts, resulting in 67 fatalities. Not 76.
2. Though the engine and fuselage were recovered, and a wing is being retrieved, the claim that the entire wreckage will be recovered within a day is incorrect.
3. The flight data recorder indicated the jet's pitch changed a second before impact, but the investigators have not determined whether it was an evasive maneuver.

[[ ## hallucinated_spans ## ]]
["76", "the entire wreckage will be recovered within a day", "the jet made an evasive maneuver"]

[[ ## completed ## ]]"#;

/// Body shared by demonstration and final user messages.
fn fields_block(source: &str, summary: &str) -> String {
    format!("[[ ## source ## ]]\n{source}\n\n[[ ## summary ## ]]\n{summary}\n\n{RESPOND_INSTRUCTION}")
}

pub fn demo_user_message(source: &str, summary: &str) -> String {
    format!("This is an example of the task.\n\n{}", fields_block(source, summary))
}

pub fn final_user_message(source: &str, summary: &str) -> String {
    fields_block(source, summary)
}
