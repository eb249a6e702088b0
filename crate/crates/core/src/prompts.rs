//! Prompt templates. The mock backend's synthetic mode keys on these exact
//! system strings, so change them together with `gateway::mock`.

pub const SUMMARIZE_SYSTEM: &str = "Summarize this conversation into one short topic sentence naming the user-specific fact or event. Reply with the topic sentence only.";

pub const TOPIC_DIALOGUE_SYSTEM: &str = "You write short everyday chats between a user and a chatbot. Given a subject, invent one fine-grained topic under it and a dialogue of 5 to 8 turns about it. Reply exactly in this layout:\nTopic: <one short topic sentence>\nUser: <utterance>\nBot: <utterance>\n(repeat User/Bot lines, one utterance per line)";

pub const CONTINUE_FIRST_SYSTEM: &str = "Several days have passed since the conversation below. Write the first turn of a new conversation that stays consistent with what the user said before but does not repeat it. Reply with exactly two lines:\nUser: <utterance>\nBot: <utterance>";

pub const CONTINUE_SECOND_SYSTEM: &str = "Continue this conversation with one more turn that follows only from the turn shown. Do not steer back to any earlier subject. Reply with exactly two lines:\nUser: <utterance>\nBot: <utterance>";

pub const SHIFT_SYSTEM: &str = "You are a chatbot that remembers earlier conversations with this user. At each turn, first think about whether now is a natural moment to bring the conversation back to the remembered topic, then decide, then reply. Reply in exactly three labeled lines:\nThoughts: <your reasoning>\nShift: <Yes or No>\nResponse: <your reply to the user>\nUse Shift: Yes only when your response steers toward the remembered topic. Ending the conversation without shifting is acceptable.";

pub const REPAIR_INSTRUCTION: &str = "Your previous reply did not follow the required format. Reply again using exactly three lines starting with `Thoughts:`, `Shift:` (Yes or No) and `Response:`.";

pub const USER_ROLE_SYSTEM: &str = "You play the user in a casual chat with a chatbot. Write the user's next message only, one line, without a speaker tag. Keep the conversation going; never say goodbye.";

pub const JUDGE_SYSTEM: &str = "Rank the numbered topics by how relevant they are to the conversation, most relevant first. Reply with every topic number exactly once, comma-separated, and nothing else.";

/// Labels for sections inside user messages.
pub const HISTORY_HEADER: &str = "Earlier conversation";
pub const CURRENT_HEADER: &str = "Current conversation";
pub const SUBJECT_PREFIX: &str = "Subject: ";
pub const TOPICS_HEADER: &str = "Topics:";
