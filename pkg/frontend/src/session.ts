/**
 * Session state for one evaluator working through a campaign:
 * the current item, per-hypothesis score selections, and the submit flow
 * (one POST per hypothesis, advance only after every acknowledgement).
 */

import { ApiClient, ApiError, NextItem } from "./api.js";
import { Level } from "./taus.js";

export interface Selection {
  adequacy?: Level;
  fluency?: Level;
}

export type SessionState = "loading" | "rating" | "done" | "error";

export class RatingSession {
  state: SessionState = "loading";
  item: NextItem | null = null;
  /** blind key -> current selections for hypotheses still to be submitted */
  selections = new Map<string, Selection>();
  /** keys the server already acknowledged (survives a refresh) */
  acknowledged = new Set<string>();
  lastError: string | null = null;
  submitting = false;

  constructor(
    private readonly api: ApiClient,
    readonly evaluatorId: string,
  ) {}

  async loadNext(): Promise<void> {
    this.state = "loading";
    this.lastError = null;
    try {
      const item = await this.api.next(this.evaluatorId);
      this.item = item;
      this.selections = new Map();
      this.acknowledged = new Set(item.rated_keys ?? []);
      if (item.done) {
        this.state = "done";
      } else {
        for (const hyp of item.hypotheses ?? []) {
          if (!this.acknowledged.has(hyp.key)) {
            this.selections.set(hyp.key, {});
          }
        }
        this.state = "rating";
      }
    } catch (err) {
      this.state = "error";
      this.lastError = err instanceof Error ? err.message : String(err);
    }
  }

  setScore(key: string, dimension: "adequacy" | "fluency", value: Level): void {
    const sel = this.selections.get(key);
    if (sel) {
      sel[dimension] = value;
    }
  }

  /** keys that still need scores before the item can be submitted */
  get pendingKeys(): string[] {
    return [...this.selections.keys()];
  }

  get complete(): boolean {
    if (this.state !== "rating" || this.selections.size === 0) {
      return this.state === "rating" && this.selections.size === 0;
    }
    for (const sel of this.selections.values()) {
      if (sel.adequacy === undefined || sel.fluency === undefined) {
        return false;
      }
    }
    return true;
  }

  get progress(): { rated: number; total: number } {
    return this.item?.progress ?? { rated: 0, total: 0 };
  }

  /**
   * Submit every pending hypothesis, then advance. Each POST is idempotent,
   * so a partial failure simply resubmits the stragglers; nothing advances
   * until all acknowledgements are in.
   */
  async submitAll(): Promise<void> {
    if (!this.complete || !this.item || this.item.done || this.submitting) {
      return;
    }
    this.submitting = true;
    this.lastError = null;
    try {
      for (const [key, sel] of this.selections) {
        await this.api.submit({
          evaluator_id: this.evaluatorId,
          item_id: this.item.item_id!,
          blind_key: key,
          adequacy: sel.adequacy!,
          fluency: sel.fluency!,
        });
        this.acknowledged.add(key);
        this.selections.delete(key);
      }
      await this.loadNext();
    } catch (err) {
      // acknowledged keys stay out of selections; only stragglers remain
      this.state = "rating";
      this.lastError =
        err instanceof ApiError
          ? err.message
          : "could not reach the server; your progress is saved, try again";
    } finally {
      this.submitting = false;
    }
  }
}
