import type {
  CompleteResponse,
  FlagSpan,
  RecordContextJson,
  ScoreResponse,
  Suggestion,
  TokenRow,
} from "./types.js";

export interface EditorState {
  note: string;
  caret: number;
  context: RecordContextJson;
  /** Suggestions as served: already capped and in descending probability. */
  suggestions: Suggestion[];
  flags: FlagSpan[];
  toast: string | null;
  modelId: string | null;
  /** Monotonic request ids; only the newest in-flight response may land. */
  nextRequestId: number;
  pendingCompletion: number | null;
  pendingScore: number | null;
}

export function emptyContext(): RecordContextJson {
  return {
    hint: "",
    note_type: "",
    gender: "",
    age_years: 0,
    meds: [],
    labs: [],
    past_notes: [],
  };
}

export function initialState(context: RecordContextJson = emptyContext()): EditorState {
  return {
    note: "",
    caret: 0,
    context,
    suggestions: [],
    flags: [],
    toast: null,
    modelId: null,
    nextRequestId: 1,
    pendingCompletion: null,
    pendingScore: null,
  };
}

/** The single inline (ghost) suggestion is always the top row, if any. */
export function ghostOf(state: EditorState): string | null {
  return state.suggestions[0]?.text ?? null;
}

/** Map scored tokens to character offsets: runs of flagged tokens become
 * spans. Token texts reassemble the note byte-for-byte, so offsets are
 * exact and the editor never re-tokenizes. */
export function spansFromTokens(rows: TokenRow[]): FlagSpan[] {
  const spans: FlagSpan[] = [];
  let offset = 0;
  let open: FlagSpan | null = null;
  for (const row of rows) {
    if (row.flagged) {
      if (open) {
        open.end = offset + row.text.length;
        if (open.suggestions.length === 0) open.suggestions = row.suggestions;
      } else {
        open = {
          start: offset,
          end: offset + row.text.length,
          suggestions: row.suggestions,
        };
      }
    } else if (open) {
      spans.push(open);
      open = null;
    }
    offset += row.text.length;
  }
  if (open) spans.push(open);
  return spans;
}

function shiftFlags(flags: FlagSpan[], at: number, by: number): FlagSpan[] {
  return flags.map((f) =>
    f.start >= at ? { ...f, start: f.start + by, end: f.end + by } : f,
  );
}

/** Insert text at the caret — the only way the buffer grows besides a
 * wholesale setNote. Pending suggestions are for the old prefix, so they
 * are dropped; flags after the caret shift to stay aligned. */
export function insertAtCaret(state: EditorState, text: string): EditorState {
  const { note, caret } = state;
  return {
    ...state,
    note: note.slice(0, caret) + text + note.slice(caret),
    caret: caret + text.length,
    suggestions: [],
    flags: shiftFlags(state.flags, caret, text.length),
  };
}

export function setNote(state: EditorState, note: string, caret: number): EditorState {
  return {
    ...state,
    note,
    caret: Math.min(caret, note.length),
    suggestions: [],
    flags: state.flags.filter((f) => f.end <= note.length),
  };
}

export function setCaret(state: EditorState, caret: number): EditorState {
  return { ...state, caret: Math.max(0, Math.min(caret, state.note.length)) };
}

export function setContext(state: EditorState, context: RecordContextJson): EditorState {
  return { ...state, context };
}

export function beginCompletion(state: EditorState): { state: EditorState; id: number } {
  const id = state.nextRequestId;
  return {
    state: { ...state, nextRequestId: id + 1, pendingCompletion: id },
    id,
  };
}

export function resolveCompletion(
  state: EditorState,
  id: number,
  res: CompleteResponse,
): EditorState {
  if (id !== state.pendingCompletion) return state; // stale response
  return {
    ...state,
    pendingCompletion: null,
    suggestions: res.suggestions,
    modelId: res.model_id,
    toast: null,
  };
}

export function failCompletion(state: EditorState, id: number, message: string): EditorState {
  if (id !== state.pendingCompletion) return state;
  return { ...state, pendingCompletion: null, suggestions: [], toast: message };
}

export function beginScore(state: EditorState): { state: EditorState; id: number } {
  const id = state.nextRequestId;
  return { state: { ...state, nextRequestId: id + 1, pendingScore: id }, id };
}

/** note is the text that was sent for scoring; if the buffer has moved on,
 * the spans no longer apply and the response is discarded. */
export function resolveScore(
  state: EditorState,
  id: number,
  note: string,
  res: ScoreResponse,
): EditorState {
  if (id !== state.pendingScore || note !== state.note) return state;
  return {
    ...state,
    pendingScore: null,
    flags: spansFromTokens(res.tokens),
    modelId: res.model_id,
    toast: null,
  };
}

export function failScore(state: EditorState, id: number, message: string): EditorState {
  if (id !== state.pendingScore) return state;
  return { ...state, pendingScore: null, toast: message };
}

/** Tab acceptance: splice the top suggestion into the buffer. */
export function acceptTop(state: EditorState): EditorState {
  const top = ghostOf(state);
  if (top === null) return state;
  return insertAtCaret(state, top);
}
