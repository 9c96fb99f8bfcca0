//! Prompt templates and tool schemas. These strings are interfaces shared
//! with the model side and must not be reworded.

pub const SYSTEM_PROMPT: &str = "You are crafting in Minecraft. You need to decide on the next action.

Crafting Grid: The crafting table is organized into a 3x3 grid. Each slot in the grid has a unique identifier:
- Top row: A1 A2 A3
- Middle row: B1 B2 B3
- Bottom row: C1 C2 C3

The output of the crafting process is placed in a designated output slot labeled 0
You cannot move or smelt items directly into slot 0

The remaining inventory slots (outside of the crafting grid) are used for storing items. These slots are labeled as I1 to I36

Before you take an action, try to think and plan the intermediate goals and next steps to take.

Constraints:
- You cannot move or smelt items into slot 0
- If an item is not in slot 0 then the recipe is incorrect
- You need to move items from slot 0 to a free inventory slot to complete the crafting process
- If you move an item to a slot already containing an item, nothing will happen
- Only call one tool or action at a time";

/// Appended to [`SYSTEM_PROMPT`] for the memory roles (ask, relevance, parse).
pub const MEMORY_SYSTEM_BLOCK: &str = "Memory System:
- You have access to a memory system where you can store and retrieve recipes and crafting knowledge.
- Your goal is to learn recipes and procedures by asking procedural questions and organizing the answers for future use.
- When storing information to memory, structure it consistently with clear component lists and steps.
- When checking relevance, consider if the memory is applicable to the current crafting situation.";

pub const ASK_PROMPT: &str = "# Agent Context:
{{context}}

Formulate a procedural how-to question about {{recipe_name}}

Consider the following:
1. Focus on asking **how** to craft the target item mentioned in the Agent Context
2. Use the agent context
3. Ensure the question is concise and focused on {{recipe_name}}
Based on the above, please provide a clear, well-formed question about {{recipe_name}}.
Only return the question. Do not include any additional text or context.";

pub const RELEVANCE_PROMPT: &str = "# Agent Context:

{{context}}

# Memory for \"{{recipe_name}}\"

{{memory}}

Check if the memory is relevant to the goal and inventory.

Answer with \"yes\" if one or more of the listed recipes can be used in this context. Otherwise, answer with \"no\".
Do not include any additional text or context in your response.";

pub const PARSE_PROMPT: &str = "Format the Teacher Answer for storage in memory.

Where the RECIPE is the primary item, recipe or concept being described.
The original recipe name ({{recipe_name}}) can be renamed if necessary to be more specific.
Avoid generic terms like \"item\", \"recipe\", \"crafting\", \"object\", \"inventory\", etc. in the RECIPE name.

Structure your memory entry with these sections:
RECIPE: {{recipe_name}}
REQUIREMENTS: [list of prequisites or materials]
PROCEDURE: [step-by-step instructions]
RELATED ITEMS: [list relevant related recipe items in python list format]

Keep your entry concise and focused on information contained within the Teacher answer.
# Agent Context
{{context}}

# Agent Question
{{question}}

# Teacher's Answer
{{answer}}

Format the Teacher's answer into a well-structured memory entry such that it will be useful for future interactions.";

pub const NON_EXECUTABLE_TEACHER_PROMPT: &str = "You are an expert Minecraft mentor providing high-level guidance on crafting tasks in answer to user questions.

Given the Agent Context and Planner Output, answer the user question.

# Background:
Crafting Grid: The crafting table is organized into a 3x3 grid.
The output of the crafting process is placed in a designated output slot
One cannot move or smelt items directly into slot the output slot
The remaining inventory slots (outside of the crafting grid) are used for storing items.

# Usage Notes:
- Smelting is done with the `smelt` command (no furnace needed)
- The crafting grid is already open (do not instruct to open it)

# Answer Guidelines:
- Use simple language and split the problem into the steps outlined in the Planner Output
- Organize information in a logical sequence
- The Planner Output is **always** correct
- Use shapes (e.g. 2x2) or patterns to describe the arrangement of items in the crafting grid

# Output Format:
Brief abstract explanation of each required step and its components in a paragraph format.

# Example
question: How can I craft a glass_bottle given my inventory?
answer: To craft a glass_bottle, first smelt sand to obtain three glass items, then arrange the glass in a small V shape in the crafting grid.

# Agent Context
{{context}}

# Planner Output
{{planner_str}}";

pub const READ_MEMORY_TOOL: &str = r#"{
  "type": "function",
  "function": {
    "name": "read_memory",
    "description": "Search a database to retrieve memories/instructions for a given recipe. Call this first or if unsure.",
    "parameters": {
      "type": "object",
      "properties": {
        "recipe": {
          "type": "string",
          "description": "Recipe name to search in memory."
        }
      },
      "required": ["recipe"]
    }
  }
}"#;

pub const THINK_TOOL: &str = r#"{
  "type": "function",
  "function": {
    "name": "think",
    "description": "Generate thoughts to help you decide on the next action",
    "parameters": {
      "type": "object",
      "properties": {
        "thought": {
          "type": "string",
          "description": "<thought message>"
        }
      },
      "required": ["thought"]
    }
  }
}"#;

pub const MOVE_TOOL: &str = r#"{
  "type": "function",
  "function": {
    "name": "move",
    "description": "Transfer a specific quantity of an item from one slot to another",
    "parameters": {
      "type": "object",
      "properties": {
        "slot_from": {
          "type": "string",
          "description": "The slot to move the item from (A1, A2, B1, B2, etc.)"
        },
        "slot_to": {
          "type": "string",
          "description": "The slot to move the item to (A1, A2, B1, B2, etc.)"
        },
        "quantity": {
          "type": "integer",
          "description": "The number of items to move"
        }
      },
      "required": ["slot_from", "slot_to", "quantity"]
    }
  }
}"#;

pub const SMELT_TOOL: &str = r#"{
    "type": "function",
    "function": {
        "name": "smelt",
        "description": "Smelt an item in a furnace and moves the output to a specific slot",
        "parameters": {
            "type": "object",
            "properties": {
                "slot_from": {
                    "type": "string",
                    "description": "The slot to smelt the item from (A1, A2, B1, B2, etc.)"
                },
                "slot_to": {
                    "type": "string",
                    "description": "The slot to smelt the item to (A1, A2, B1, B2, etc.)"
                },
                "quantity": {
                    "type": "integer",
                    "description": "The number of items to smelt"
                }
            },
            "required": ["slot_from", "slot_to", "quantity"]
        }
    }
}"#;

pub const IMPOSSIBLE_TOOL: &str = r#"{
    "type": "function",
    "function": {
        "name": "impossible",
        "description": "Stop task if it is certain that it is impossible with given inventory",
        "parameters": {
            "type": "object",
            "properties": {
                "reason": {
                    "type": "string",
                    "description": "The reason why the action is impossible"
                }
            },
            "required": ["reason"]
        }
    }
}"#;

/// System prompt for the memory roles.
pub fn memory_system_prompt() -> String {
    format!("{SYSTEM_PROMPT}\n\n{MEMORY_SYSTEM_BLOCK}")
}

/// Substitutes `{{key}}` placeholders. Values are inserted literally, so a
/// value containing a placeholder is never expanded a second time.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start..].find("}}") else {
            break;
        };
        let key = &rest[start + 2..start + len];
        out.push_str(&rest[..start]);
        match vars.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(&rest[start..start + len + 2]),
        }
        rest = &rest[start + len + 2..];
    }
    out.push_str(rest);
    out
}
