/**
 * One-item-per-screen rating view.
 *
 * The source segment renders on top, each blinded hypothesis below it with
 * two radio scales (adequacy, fluency). Keyboard-only flow: Tab/arrows move
 * focus between radio groups as usual, digits 1..4 score the group under
 * focus (or the first unscored group), Enter submits once everything on the
 * item is scored. System identity never reaches this module at all: the
 * server only ever sends opaque keys.
 */

import { RatingSession } from "./session.js";
import {
  ADEQUACY_LABELS,
  ADEQUACY_QUESTION,
  FLUENCY_LABELS,
  FLUENCY_QUESTION,
  LEVELS,
  Level,
} from "./taus.js";

export class RaterView {
  constructor(
    private readonly root: HTMLElement,
    private readonly session: RatingSession,
  ) {
    this.root.addEventListener("keydown", (ev) => this.onKey(ev as KeyboardEvent));
  }

  async start(): Promise<void> {
    await this.session.loadNext();
    this.render();
  }

  render(): void {
    const s = this.session;
    this.root.textContent = "";
    if (s.state === "loading") {
      this.root.append(el("p", "status", "Loading…"));
      return;
    }
    if (s.state === "error") {
      const banner = el("div", "banner error");
      banner.append(
        el("p", "", s.lastError ?? "Something went wrong."),
        button("Retry", "retry", async () => {
          await s.loadNext();
          this.render();
        }),
      );
      this.root.append(banner);
      return;
    }
    if (s.state === "done") {
      const done = el("div", "done-screen");
      done.append(
        el("h2", "", "All done!"),
        el("p", "", `You rated ${s.progress.rated} of ${s.progress.total} items. Thank you.`),
      );
      this.root.append(done);
      return;
    }
    const item = s.item!;
    const header = el("header", "progress-header");
    header.append(
      el("h2", "", `Item ${s.progress.rated + 1} of ${s.progress.total}`),
      el("span", "progress-count", `${s.progress.rated}/${s.progress.total} completed`),
    );
    const source = el("section", "source");
    source.append(el("h3", "", "Source"), el("p", "source-text", item.source_text ?? ""));
    this.root.append(header, source);

    if (s.lastError) {
      this.root.append(el("div", "banner error inline", s.lastError));
    }

    for (const hyp of item.hypotheses ?? []) {
      const card = el("article", "hypothesis");
      card.dataset.key = hyp.key;
      const title = el("h4", "", `Translation ${hyp.key}`);
      card.append(title, el("p", "hyp-text", hyp.text));
      if (s.acknowledged.has(hyp.key)) {
        card.classList.add("saved");
        card.append(el("p", "saved-note", "Saved ✓"));
      } else {
        card.append(
          this.scaleGroup(hyp.key, "adequacy", ADEQUACY_QUESTION, ADEQUACY_LABELS),
          this.scaleGroup(hyp.key, "fluency", FLUENCY_QUESTION, FLUENCY_LABELS),
        );
      }
      this.root.append(card);
    }

    const footer = el("footer", "actions");
    const submit = button("Submit and continue", "submit", () => this.submit());
    submit.disabled = !s.complete || s.submitting;
    footer.append(submit);
    this.root.append(footer);
  }

  private scaleGroup(
    key: string,
    dimension: "adequacy" | "fluency",
    question: string,
    labels: Record<Level, string>,
  ): HTMLElement {
    const sel = this.session.selections.get(key);
    const wrap = el("fieldset", `scale ${dimension}`);
    wrap.dataset.key = key;
    wrap.dataset.dimension = dimension;
    const legend = document.createElement("legend");
    legend.textContent = question;
    wrap.append(legend);
    for (const level of LEVELS) {
      const id = `${key}-${dimension}-${level}`;
      const label = document.createElement("label");
      label.htmlFor = id;
      const input = document.createElement("input");
      input.type = "radio";
      input.id = id;
      input.name = `${key}-${dimension}`;
      input.value = String(level);
      input.checked = sel?.[dimension] === level;
      input.addEventListener("change", () => {
        this.session.setScore(key, dimension, level);
        this.refreshSubmit();
      });
      label.append(input, el("span", "", `${level} – ${labels[level]}`));
      wrap.append(label);
    }
    return wrap;
  }

  private refreshSubmit(): void {
    const submit = this.root.querySelector<HTMLButtonElement>("button.submit");
    if (submit) {
      submit.disabled = !this.session.complete || this.session.submitting;
    }
  }

  private async submit(): Promise<void> {
    if (!this.session.complete) {
      return;
    }
    this.render(); // shows the disabled submit while in flight
    await this.session.submitAll();
    this.render();
  }

  /** Digits score the focused (or first unscored) group; Enter submits. */
  private onKey(ev: KeyboardEvent): void {
    if (this.session.state !== "rating") {
      return;
    }
    if (ev.key >= "1" && ev.key <= "4") {
      const level = Number(ev.key) as Level;
      const group = this.focusedGroup() ?? this.firstUnscoredGroup();
      if (group) {
        group.querySelector<HTMLInputElement>(`input[value="${level}"]`)?.click();
        // advance to the next unscored group so digit entry flows downwards
        const next = this.firstUnscoredGroup();
        if (next) {
          next.querySelector<HTMLInputElement>("input")?.focus();
        } else {
          this.root.querySelector<HTMLButtonElement>("button.submit")?.focus();
        }
        ev.preventDefault();
      }
    } else if (ev.key === "Enter" && this.session.complete) {
      ev.preventDefault();
      void this.submit();
    }
  }

  private focusedGroup(): HTMLElement | null {
    const active = document.activeElement;
    if (active instanceof HTMLElement) {
      return active.closest("fieldset.scale");
    }
    return null;
  }

  private firstUnscoredGroup(): HTMLElement | null {
    for (const group of this.root.querySelectorAll<HTMLElement>("fieldset.scale")) {
      if (!group.querySelector("input:checked")) {
        return group;
      }
    }
    return null;
  }
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function button(text: string, className: string, onClick: () => void): HTMLButtonElement {
  const node = document.createElement("button");
  node.className = className;
  node.textContent = text;
  node.addEventListener("click", onClick);
  return node;
}
