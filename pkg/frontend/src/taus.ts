/**
 * Static wording for the two 4-level scales. Only the integers 1..4 are ever
 * stored or transmitted; these strings exist purely as on-screen guidance.
 */

export type Level = 1 | 2 | 3 | 4;

export const LEVELS: Level[] = [4, 3, 2, 1];

export const ADEQUACY_QUESTION =
  "How much of the meaning of the source is expressed in the translation?";

export const FLUENCY_QUESTION =
  "Is the translation well-formed, natural target language?";

export const ADEQUACY_LABELS: Record<Level, string> = {
  4: "Everything",
  3: "Most",
  2: "Little",
  1: "None",
};

export const FLUENCY_LABELS: Record<Level, string> = {
  4: "Flawless",
  3: "Good",
  2: "Disfluent",
  1: "Incomprehensible",
};
