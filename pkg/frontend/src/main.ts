/**
 * Bootstrap: figure out which campaign and who is rating, then start the
 * one-item-per-screen flow. Configuration is limited to the API base URL
 * (same origin when served by the rating service itself).
 */

import { ApiClient } from "./api.js";
import { RatingSession } from "./session.js";
import { RaterView } from "./ui.js";

declare global {
  interface Window {
    MTKIT_API_BASE?: string;
  }
}

function param(name: string): string | null {
  return new URLSearchParams(window.location.search).get(name);
}

function remembered(key: string, queryValue: string | null): string {
  if (queryValue) {
    localStorage.setItem(key, queryValue);
    return queryValue;
  }
  const stored = localStorage.getItem(key);
  if (stored) {
    return stored;
  }
  const answer = window.prompt(key === "mtkit.campaign" ? "Campaign id:" : "Your evaluator id:") ?? "";
  localStorage.setItem(key, answer);
  return answer;
}

export function boot(root: HTMLElement): RaterView {
  const base = window.MTKIT_API_BASE ?? "";
  const campaign = remembered("mtkit.campaign", param("campaign"));
  const evaluator = remembered("mtkit.evaluator", param("evaluator"));
  const api = new ApiClient(base, campaign);
  const session = new RatingSession(api, evaluator);
  const view = new RaterView(root, session);
  void view.start();
  return view;
}

const rootElement = document.getElementById("app");
if (rootElement) {
  boot(rootElement);
}
